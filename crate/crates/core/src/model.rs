//! The assembled model — autoencoder, foreground encoder, U-Net — and its
//! checkpoint directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePredictor;
use crate::encoders::{Autoencoder, EncoderConfig, FgVars, ForegroundEmbeddings, ForegroundEncoder};
use crate::error::{Error, Result};
use crate::generator::{Conditioning, GeneratorConfig, Indicator, UNet, UNetInput};
use crate::geometry::BoundingBox;
use crate::numerics::container::{load_map, save_map};
use crate::numerics::{ParamStore, Rng, Session, Tensor, Var};

pub const SCHEMA_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.json";
pub const PARAMS_FILE: &str = "params.cctm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub schema_version: u32,
    pub encoder: EncoderConfig,
    pub generator: GeneratorConfig,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            encoder: EncoderConfig::default(),
            generator: GeneratorConfig::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self { encoder: EncoderConfig::tiny(), generator: GeneratorConfig::tiny(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "config schema {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.encoder.validate()?;
        self.generator.validate(self.encoder.latent_size())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub ae: Autoencoder,
    pub fg: ForegroundEncoder,
    pub unet: UNet,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::substream(config.init_seed, "init", 0);
        let ae = Autoencoder::new(&mut store, &config.encoder, &mut rng.fork("ae"))?;
        let fg = ForegroundEncoder::new(&mut store, &config.encoder, &mut rng.fork("fg"))?;
        let unet = UNet::new(&mut store, &config.encoder, &config.generator, &mut rng.fork("unet"))?;
        let mut m = Self { config, store, ae, fg, unet };
        m.apply_trainability();
        Ok(m)
    }

    /// Generator training updates the U-Net, the null embedding and (when
    /// configured) the foreground encoder; the autoencoder stays frozen.
    pub fn apply_trainability(&mut self) {
        self.store.set_trainable("ae.", false);
        self.store.set_trainable("fg.", self.config.encoder.fg_trainable);
        self.store.set_trainable("fg.null_global", true);
        self.store.set_trainable("unet.", true);
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&self.config)?)?;
        save_map(&dir.join(PARAMS_FILE), &self.store.to_map())
    }

    /// Loads a checkpoint directory; a missing directory or file is a
    /// [`Error::State`].
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&cfg_path)
            .map_err(|e| Error::State(format!("no checkpoint config at {}: {e}", cfg_path.display())))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        let mut m = Self::new(config)?;
        m.store.load_map(&load_map(&dir.join(PARAMS_FILE))?)?;
        Ok(m)
    }

    /// Foreground embeddings on the tape, optionally with the null global.
    pub fn fg_vars(&self, s: &mut Session, foreground: &Tensor, null_global: bool) -> Result<FgVars> {
        let mut v = self.fg.forward(s, foreground)?;
        if null_global {
            v.global = self.fg.null_var(s)?;
        }
        Ok(v)
    }

    pub fn embed_foreground(&self, foreground: &Tensor) -> Result<ForegroundEmbeddings> {
        self.fg.encode(&self.store, foreground)
    }

    pub fn unet_forward(
        &self,
        s: &mut Session,
        input: &UNetInput,
        global: Var,
        local: Var,
        bbox: &BoundingBox,
        indicator: Indicator,
        local_enhancement: bool,
    ) -> Result<Var> {
        let cond = Conditioning { global, local, indicator, bbox: *bbox, local_enhancement };
        self.unet.forward(s, input, &cond)
    }
}

impl NoisePredictor for Model {
    fn predict(
        &self,
        input: &UNetInput,
        emb: &ForegroundEmbeddings,
        bbox: &BoundingBox,
        indicator: Indicator,
        unconditional: bool,
    ) -> Result<Tensor> {
        let mut s = Session::new(&self.store);
        let global_vec = if unconditional { self.fg.null_embedding(&self.store) } else { emb.global.clone() };
        let dg = global_vec.len();
        let global = s.constant(global_vec.reshape(&[1, dg])?)?;
        let local = s.constant(emb.local.clone())?;
        let le = !unconditional || self.config.generator.le_in_uncond;
        let out = self.unet_forward(&mut s, input, global, local, bbox, indicator, le)?;
        Ok(s.value(out).clone())
    }

    fn latent_factor(&self) -> usize {
        self.config.encoder.latent_factor
    }
}
