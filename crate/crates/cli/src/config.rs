//! Run configuration: preset defaults, deep-merged with an optional JSON
//! file, then with command-line overrides.

use std::path::{Path, PathBuf};

use controlcom::data::DataConfig;
use controlcom::diffusion::{make_schedule, NoiseSchedule, SamplerConfig, ScheduleKind, TrainConfig};
use controlcom::model::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

pub const RESOLVED_CONFIG_FILE: &str = "run_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub outputs: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(make_schedule(self.kind, self.steps, self.beta_start, self.beta_end)?)
    }
}

/// Reconstruction pretraining of the autoencoder before generator training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderPretrain {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub n_sources: usize,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub ae_pretrain: AutoencoderPretrain,
    /// Every component derives its random stream from this seed.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// 32×32 images, 8×8 latents.
    Tiny,
    /// 64×64 images, 16×16 latents.
    Default,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let (model, data) = match p {
            Preset::Tiny => (ModelConfig::tiny(), DataConfig::tiny()),
            Preset::Default => (ModelConfig::default(), DataConfig::default()),
        };
        Self {
            paths: Paths {
                dataset: "data".into(),
                checkpoint: "checkpoint".into(),
                outputs: "outputs".into(),
            },
            model,
            data,
            n_sources: 100,
            schedule: ScheduleConfig {
                kind: ScheduleKind::ScaledLinear,
                steps: 1000,
                beta_start: 0.00085,
                beta_end: 0.012,
            },
            sampler: SamplerConfig::default(),
            train: TrainConfig { epochs: 100, lr: 1e-3, batch: 8, seed: 0 },
            ae_pretrain: AutoencoderPretrain { epochs: 600, batch: 8, lr: 3e-3 },
            seed: 0,
        }
    }

    /// Preset, then `file` (merged key by key), then `overrides` (a JSON
    /// object built from flags). The seed is propagated to every component.
    pub fn resolve(preset: Preset, file: Option<&Path>, overrides: Value) -> Result<Self> {
        let mut merged = serde_json::to_value(Self::preset(preset)).expect("config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
            merge(&mut merged, v);
        }
        merge(&mut merged, overrides);
        let mut cfg: Self =
            serde_json::from_value(merged).map_err(|e| CliError::Usage(format!("invalid run config: {e}")))?;
        cfg.model.init_seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.sampler.validate(&self.schedule.build()?)?;
        let enc = &self.model.encoder;
        if self.data.image_size != enc.image_size || self.data.fg_size != enc.fg_size {
            return Err(CliError::Usage(format!(
                "data sizes {}/{} disagree with the model's {}/{}",
                self.data.image_size, self.data.fg_size, enc.image_size, enc.fg_size
            )));
        }
        if self.train.batch == 0 || !(self.train.lr > 0.0) || self.ae_pretrain.batch == 0 || !(self.ae_pretrain.lr > 0.0) {
            return Err(CliError::Usage("batch sizes and learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn write_beside(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RESOLVED_CONFIG_FILE), serde_json::to_string_pretty(self).expect("config serializes"))?;
        Ok(())
    }
}

/// Recursive object merge; anything that is not an object on both sides is
/// replaced.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `value` at a dotted `path` inside `root`, creating objects on the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for k in &keys[..keys.len() - 1] {
        if !cur.get(*k).is_some_and(Value::is_object) {
            cur[*k] = Value::Object(Default::default());
        }
        cur = cur.get_mut(*k).expect("just inserted");
    }
    cur[keys[keys.len() - 1]] = value;
}
