use controlcom::Error as CoreError;
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config or input files.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 internal, 2 config/validation, 3 missing state.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 1,
            CliError::Core(e) => match e {
                CoreError::Config(_)
                | CoreError::Validation(_)
                | CoreError::Shape(_)
                | CoreError::Geometry(_)
                | CoreError::RankDeficient(_)
                | CoreError::Json(_)
                | CoreError::Csv(_)
                | CoreError::Image(_) => 2,
                CoreError::State(_) => 3,
                CoreError::Numerical(_) | CoreError::Training(_) | CoreError::Io(_) => 1,
            },
        }
    }
}
