//! The indicator-conditioned U-Net noise predictor.

mod local;
mod unet;

pub use local::{FeatureModulation, LocalEnhancement};
pub use unet::{Conditioning, GlobalFusion, UNet};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, LATENT_CHANNELS};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::numerics::kernels::resize_nearest;
use crate::numerics::{ParamStore, Rng, Tensor};

/// Two-bit task selector: whether illumination and pose may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Indicator {
    pub illumination: bool,
    pub pose: bool,
}

impl Indicator {
    pub const BLEND: Self = Self { illumination: false, pose: false };
    pub const HARMONIZE: Self = Self { illumination: true, pose: false };
    pub const VIEW_SYNTHESIS: Self = Self { illumination: false, pose: true };
    pub const COMPOSE: Self = Self { illumination: true, pose: true };
    pub const ALL: [Self; 4] = [Self::BLEND, Self::HARMONIZE, Self::VIEW_SYNTHESIS, Self::COMPOSE];

    pub fn new(illumination: bool, pose: bool) -> Self {
        Self { illumination, pose }
    }

    pub fn bits(self) -> [f64; 2] {
        [self.illumination as u8 as f64, self.pose as u8 as f64]
    }

    /// Position in [`Self::ALL`].
    pub fn index(self) -> usize {
        self.illumination as usize + 2 * self.pose as usize
    }

    pub fn task_name(self) -> &'static str {
        match (self.illumination, self.pose) {
            (false, false) => "blend",
            (true, false) => "harmonize",
            (false, true) => "view_synthesis",
            (true, true) => "compose",
        }
    }
}

impl fmt::Display for Indicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.illumination as u8, self.pose as u8)
    }
}

impl FromStr for Indicator {
    type Err = Error;

    /// Parses `"a,b"` with bits in `{0,1}`.
    fn from_str(s: &str) -> Result<Self> {
        let bit = |v: &str| match v.trim() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::Validation(format!("indicator bit {other:?} is not 0 or 1"))),
        };
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 2 {
            return Err(Error::Validation(format!("indicator {s:?} must look like 1,0")));
        }
        Ok(Self { illumination: bit(parts[0])?, pose: bit(parts[1])? })
    }
}

/// Model variants of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// Cross-attention over the class token and all patch tokens; no
    /// indicator, no local enhancement, plain (unaugmented) data.
    #[serde(rename = "global_only_all_tokens")]
    GlobalOnlyAllTokens,
    /// Class token only; no indicator, no local enhancement, plain data.
    #[serde(rename = "global_only_class")]
    GlobalOnlyClass,
    /// Class token with the indicator, trained on augmented tuples.
    #[serde(rename = "+aug", alias = "with_aug")]
    WithAug,
    /// Adds local enhancement without feature modulation.
    #[serde(rename = "+LE_no_FM", alias = "le_no_fm")]
    LocalNoModulation,
    #[serde(rename = "full")]
    Full,
}

impl Ablation {
    pub const ALL: [Self; 5] = [
        Self::GlobalOnlyAllTokens,
        Self::GlobalOnlyClass,
        Self::WithAug,
        Self::LocalNoModulation,
        Self::Full,
    ];

    pub fn uses_indicator(self) -> bool {
        matches!(self, Self::WithAug | Self::LocalNoModulation | Self::Full)
    }

    /// Whether training consumes the augmented four-task tuples.
    pub fn uses_augmented_data(self) -> bool {
        self.uses_indicator()
    }

    pub fn uses_local_enhancement(self) -> bool {
        matches!(self, Self::LocalNoModulation | Self::Full)
    }

    pub fn uses_modulation(self) -> bool {
        self == Self::Full
    }

    pub fn all_tokens_context(self) -> bool {
        self == Self::GlobalOnlyAllTokens
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::GlobalOnlyAllTokens => "global_only_all_tokens",
            Self::GlobalOnlyClass => "global_only_class",
            Self::WithAug => "+aug",
            Self::LocalNoModulation => "+LE_no_FM",
            Self::Full => "full",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Validation(format!("unknown ablation {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Latent resolutions (side lengths) carrying transformer blocks.
    pub attention_resolutions: Vec<usize>,
    /// Latent resolutions where local enhancement attaches.
    pub le_resolutions: Vec<usize>,
    /// RoIAlign output size.
    pub p: usize,
    pub time_embed_dim: usize,
    pub cfg_drop_prob: f64,
    pub ablation: Ablation,
    pub norm_groups: usize,
    /// Keep local enhancement active (with the real local embeddings) in the
    /// unconditional branch of classifier-free guidance.
    pub le_in_uncond: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_multipliers: vec![1, 2],
            attention_resolutions: vec![16, 8],
            le_resolutions: vec![16, 8],
            p: 8,
            time_embed_dim: 64,
            cfg_drop_prob: 0.2,
            ablation: Ablation::Full,
            norm_groups: 8,
            le_in_uncond: true,
        }
    }
}

impl GeneratorConfig {
    /// Tiny configuration for an 8×8 latent.
    pub fn tiny() -> Self {
        Self {
            base_channels: 16,
            attention_resolutions: vec![8, 4],
            le_resolutions: vec![8, 4],
            p: 4,
            time_embed_dim: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self, latent_size: usize) -> Result<()> {
        if self.p < 2 {
            return Err(Error::config(format!("RoIAlign size p={} must be at least 2", self.p)));
        }
        if !(0.0..=1.0).contains(&self.cfg_drop_prob) {
            return Err(Error::config(format!("drop probability {} outside [0,1]", self.cfg_drop_prob)));
        }
        if let Some(r) = self.le_resolutions.iter().find(|r| !self.attention_resolutions.contains(r)) {
            return Err(Error::config(format!("local enhancement at {r} lacks a transformer block")));
        }
        if self.base_channels == 0 || self.norm_groups == 0 || self.time_embed_dim == 0 {
            return Err(Error::config("channel counts and groups must be positive"));
        }
        let levels = self.channel_multipliers.len();
        if levels > 0 && latent_size % (1 << (levels - 1)) != 0 {
            return Err(Error::config(format!("latent {latent_size} cannot be halved {} times", levels - 1)));
        }
        let mut widths = vec![self.base_channels];
        let mut prev = self.base_channels;
        for &m in &self.channel_multipliers {
            let c = self.base_channels * m;
            widths.extend([c, c + prev, 2 * c]);
            prev = c;
        }
        if let Some(w) = widths.iter().find(|w| *w % self.norm_groups != 0) {
            return Err(Error::config(format!("{} groups do not divide width {w}", self.norm_groups)));
        }
        Ok(())
    }

    /// Side length of each level of the U-Net.
    pub fn level_resolutions(&self, latent_size: usize) -> Vec<usize> {
        (0..self.channel_multipliers.len()).map(|i| latent_size >> i).collect()
    }
}

/// Stacked U-Net input at latent resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetInput {
    pub z_t: Tensor,
    pub bg_latent: Tensor,
    /// Binary `[1, h, w]` box mask.
    pub mask_ds: Tensor,
    /// `[2, h, w]`, the indicator broadcast over space.
    pub indicator_map: Tensor,
    pub t: usize,
}

pub const INPUT_CHANNELS: usize = 2 * LATENT_CHANNELS + 1 + 2;

impl UNetInput {
    /// The `[11, h, w]` network input.
    pub fn stacked(&self) -> Result<Tensor> {
        Tensor::concat(&[&self.z_t, &self.bg_latent, &self.mask_ds, &self.indicator_map])
    }
}

/// `[2, h, w]` map holding the indicator bits.
pub fn indicator_map(indicator: Indicator, h: usize, w: usize) -> Tensor {
    let bits = indicator.bits();
    Tensor::from_fn(&[2, h, w], |i| bits[i / (h * w)])
}

/// Builds the network input; the box mask is rasterized at image
/// resolution (`latent_factor` × latent) and nearest-downsampled.
pub fn assemble_input(
    z_t: &Tensor,
    bg_latent: &Tensor,
    bbox: &BoundingBox,
    indicator: Indicator,
    t: usize,
    latent_factor: usize,
) -> Result<UNetInput> {
    let (c, h, w) = z_t.dims3()?;
    if c != LATENT_CHANNELS || bg_latent.shape() != z_t.shape() {
        return Err(Error::shape(format!(
            "noisy latent {:?} and background latent {:?} must both be [4,h,w]",
            z_t.shape(),
            bg_latent.shape()
        )));
    }
    let f = latent_factor.max(1);
    let mask = resize_nearest(&bbox.mask(h * f, w * f), h, w)?;
    Ok(UNetInput {
        z_t: z_t.clone(),
        bg_latent: bg_latent.clone(),
        mask_ds: mask,
        indicator_map: indicator_map(indicator, h, w),
        t,
    })
}

/// Parameter count per module path (first two name components) of the
/// U-Net built from these configurations.
pub fn parameter_census(enc: &EncoderConfig, cfg: &GeneratorConfig) -> Result<BTreeMap<String, usize>> {
    let mut store = ParamStore::new();
    UNet::new(&mut store, enc, cfg, &mut Rng::new(0))?;
    let mut out = BTreeMap::new();
    for (name, t) in store.to_map() {
        let key: Vec<&str> = name.split('.').take(2).collect();
        *out.entry(key.join(".")).or_insert(0) += t.len();
    }
    Ok(out)
}

/// Total number of U-Net parameters.
pub fn count_parameters(enc: &EncoderConfig, cfg: &GeneratorConfig) -> Result<usize> {
    Ok(parameter_census(enc, cfg)?.values().sum())
}
