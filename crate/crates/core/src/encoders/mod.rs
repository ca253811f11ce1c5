//! Latent autoencoder and the foreground encoder.

mod autoencoder;
mod foreground;

pub use autoencoder::{Autoencoder, ReconstructionRun};
pub use foreground::{patchify, FgVars, ForegroundEncoder};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Number of latent channels.
pub const LATENT_CHANNELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    /// Spatial downsampling factor of the autoencoder.
    pub latent_factor: usize,
    pub ae_channels: usize,
    pub fg_size: usize,
    pub patch_size: usize,
    pub vit_depth: usize,
    pub vit_width: usize,
    /// 1-based block whose class token feeds the global embedding.
    pub deep_layer_index: usize,
    /// 1-based block whose patch tokens become the local embeddings.
    pub shallow_layer_index: usize,
    pub mlp_layers: usize,
    pub global_dim: usize,
    /// Whether the foreground encoder is updated during generator training.
    pub fg_trainable: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            latent_factor: 4,
            ae_channels: 32,
            fg_size: 64,
            patch_size: 8,
            vit_depth: 4,
            vit_width: 64,
            deep_layer_index: 4,
            shallow_layer_index: 2,
            mlp_layers: 5,
            global_dim: 64,
            fg_trainable: true,
        }
    }
}

impl EncoderConfig {
    /// Desk-scale configuration used by tests and the overfit preset.
    pub fn tiny() -> Self {
        Self { image_size: 32, ae_channels: 16, fg_size: 32, ..Self::default() }
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.latent_factor
    }

    pub fn num_patches(&self) -> usize {
        (self.fg_size / self.patch_size).pow(2)
    }

    pub fn local_dim(&self) -> usize {
        self.vit_width
    }

    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.latent_factor) {
            return Err(Error::config(format!("latent factor {} not in {{2,4,8}}", self.latent_factor)));
        }
        if self.image_size == 0 || self.image_size % self.latent_factor != 0 {
            return Err(Error::config(format!(
                "image size {} not divisible by {}",
                self.image_size, self.latent_factor
            )));
        }
        if self.patch_size == 0 || self.fg_size == 0 || self.fg_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "foreground size {} not divisible by patch size {}",
                self.fg_size, self.patch_size
            )));
        }
        if !(1 <= self.shallow_layer_index
            && self.shallow_layer_index < self.deep_layer_index
            && self.deep_layer_index <= self.vit_depth)
        {
            return Err(Error::config(format!(
                "need 1 <= shallow ({}) < deep ({}) <= depth ({})",
                self.shallow_layer_index, self.deep_layer_index, self.vit_depth
            )));
        }
        if self.mlp_layers == 0 || self.vit_width == 0 || self.global_dim == 0 || self.ae_channels == 0 {
            return Err(Error::config("encoder widths and MLP depth must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentSource {
    Composite,
    Background,
}

/// Autoencoder latent `[4, H/f, W/f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub values: Tensor,
    pub source: LatentSource,
}

impl LatentCode {
    pub fn new(values: Tensor, source: LatentSource) -> Result<Self> {
        let (c, _, _) = values.dims3()?;
        if c != LATENT_CHANNELS {
            return Err(Error::shape(format!("latent needs {LATENT_CHANNELS} channels, got {c}")));
        }
        Ok(Self { values, source })
    }
}

/// Output of the foreground encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundEmbeddings {
    /// `[d_g]`
    pub global: Tensor,
    /// `[n_p, d_l]`
    pub local: Tensor,
    /// Set when `global` was replaced by the learned null embedding.
    pub null_global: bool,
}

impl ForegroundEmbeddings {
    /// Copy with the global embedding swapped for `null`.
    pub fn with_null_global(&self, null: &Tensor) -> Self {
        Self { global: null.clone(), local: self.local.clone(), null_global: true }
    }
}

pub(crate) fn expect_image(image: &Tensor, size: usize, what: &str) -> Result<()> {
    if image.shape() != [3, size, size] {
        return Err(Error::shape(format!("{what} must be [3,{size},{size}], got {:?}", image.shape())));
    }
    Ok(())
}
