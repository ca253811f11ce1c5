mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use controlcom::generator::Indicator;
use controlcom::BoundingBox;
use serde_json::{json, Value};

use config::{set_path, Preset, RunConfig};
use error::{CliError, Result};

const THREADS_ENV: &str = "CONTROLCOM_MICRO_THREADS";

#[derive(Parser)]
#[command(name = "controlcom", version, about = "Indicator-controlled image composition with latent diffusion")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config, merged over the preset; flags win over the file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "tiny")]
    preset: Preset,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic training set: four task tuples per source.
    Prepare {
        #[arg(long)]
        sources: Option<usize>,
        /// Dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the autoencoder, then train the generator.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Total epochs, counted from the start of the run.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        /// global_only_all_tokens, global_only_class, +aug, +LE_no_FM or full.
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        ae_epochs: Option<usize>,
        /// Continue from the checkpoint's saved training state.
        #[arg(long)]
        resume: bool,
    },
    /// Compose a foreground into a background.
    Compose {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        background: PathBuf,
        #[arg(long)]
        foreground: PathBuf,
        /// Normalized x0,y0,x1,y1.
        #[arg(long = "box")]
        bbox: String,
        /// Illumination,pose bits, e.g. 1,0.
        #[arg(long, conflicts_with = "all_indicators")]
        indicator: Option<String>,
        /// Sample all four indicators from the same initial noise.
        #[arg(long)]
        all_indicators: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metric reports and subjective-score aggregation.
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Masked background SSIM (and foreground similarity with a checkpoint).
    Metrics {
        /// JSON file: {"items": [{id, background, composite, box, foreground?, mask?}]}.
        #[arg(long)]
        items: PathBuf,
        /// Also score foreground similarity with this checkpoint's encoder.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bradley-Terry scores from a CSV of method_a,method_b,wins_a,wins_b.
    Bt {
        #[arg(long)]
        csv: PathBuf,
        /// Write the scores as a metric report.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, default_value_t = 10_000)]
        max_iter: usize,
    },
    /// Average ranks from {"methods", "quality", "fidelity"} rank vectors.
    Rank {
        #[arg(long)]
        rankings: PathBuf,
    },
}

fn parse_box(s: &str) -> Result<BoundingBox> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("box {s:?}: {e}")))?;
    let [x0, y0, x1, y1] = v[..] else {
        return Err(CliError::Usage(format!("box {s:?} needs four numbers")));
    };
    Ok(BoundingBox::new(x0, y0, x1, y1)?)
}

fn cap_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size the thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    cap_threads()?;
    let mut over = json!({});
    if let Some(seed) = cli.common.seed {
        set_path(&mut over, "seed", json!(seed));
    }
    let mut put = |path: &str, v: Option<Value>| {
        if let Some(v) = v {
            set_path(&mut over, path, v);
        }
    };
    let resolve = |over: Value| RunConfig::resolve(cli.common.preset, cli.common.config.as_deref(), over);
    match cli.command {
        Command::Prepare { sources, out } => {
            put("n_sources", sources.map(|v| json!(v)));
            put("paths.dataset", out.map(|v| json!(v)));
            commands::prepare(&resolve(over)?)
        }
        Command::Train { dataset, checkpoint, epochs, lr, batch, ablation, ae_epochs, resume } => {
            put("paths.dataset", dataset.map(|v| json!(v)));
            put("paths.checkpoint", checkpoint.map(|v| json!(v)));
            put("train.epochs", epochs.map(|v| json!(v)));
            put("train.lr", lr.map(|v| json!(v)));
            put("train.batch", batch.map(|v| json!(v)));
            put("model.generator.ablation", ablation.map(|v| json!(v)));
            put("ae_pretrain.epochs", ae_epochs.map(|v| json!(v)));
            commands::train_cmd(&resolve(over)?, resume)
        }
        Command::Compose { checkpoint, background, foreground, bbox, indicator, all_indicators, steps, guidance, out } => {
            put("paths.checkpoint", checkpoint.map(|v| json!(v)));
            put("paths.outputs", out.map(|v| json!(v)));
            put("sampler.ddim_steps", steps.map(|v| json!(v)));
            put("sampler.guidance_scale", guidance.map(|v| json!(v)));
            let cfg = resolve(over)?;
            let indicators = match (indicator, all_indicators) {
                (_, true) => Indicator::ALL.to_vec(),
                (Some(s), false) => vec![Indicator::from_str(&s)?],
                (None, false) => return Err(CliError::Usage("give --indicator or --all-indicators".into())),
            };
            let req = commands::ComposeRequest { background, foreground, bbox: parse_box(&bbox)?, indicators };
            commands::compose(&cfg, &req)
        }
        Command::Eval { command } => match command {
            EvalCommand::Metrics { items, checkpoint, out } => {
                let with_model = checkpoint.is_some();
                put("paths.checkpoint", checkpoint.map(|v| json!(v)));
                put("paths.outputs", out.map(|v| json!(v)));
                commands::eval_metrics(&resolve(over)?, &items, with_model)
            }
            EvalCommand::Bt { csv, out, tol, max_iter } => commands::eval_bt(&csv, out.as_deref(), tol, max_iter),
            EvalCommand::Rank { rankings } => commands::eval_rank(&rankings),
        },
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
