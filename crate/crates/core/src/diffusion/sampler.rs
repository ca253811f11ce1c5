use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{cfg_combine, ddim_step, NoisePredictor, NoiseSchedule};
use crate::encoders::{expect_image, ForegroundEmbeddings, LatentSource, LATENT_CHANNELS};
use crate::error::{Error, Result};
use crate::generator::{assemble_input, Indicator};
use crate::geometry::BoundingBox;
use crate::model::Model;
use crate::numerics::kernels::resize_bilinear;
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub ddim_steps: usize,
    pub guidance_scale: f64,
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { ddim_steps: 50, guidance_scale: 5.0, eta: 0.0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.ddim_steps == 0 || self.ddim_steps > sched.steps() {
            return Err(Error::config(format!(
                "DDIM steps {} outside [1, {}]",
                self.ddim_steps,
                sched.steps()
            )));
        }
        if self.eta < 0.0 || !self.guidance_scale.is_finite() {
            return Err(Error::config("eta must be non-negative and the guidance scale finite"));
        }
        Ok(())
    }
}

/// Descending timesteps `(steps−1)·c, …, c, 0` with `c = T / steps`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    let c = total / steps.max(1);
    (0..steps).rev().map(|i| i * c).collect()
}

/// Hex SHA-256 over the bit patterns of a tensor.
pub fn noise_hash(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Guided DDIM loop in latent space, starting from `z_t_init`.
#[allow(clippy::too_many_arguments)]
pub fn sample_latent(
    model: &dyn NoisePredictor,
    bg_latent: &Tensor,
    emb: &ForegroundEmbeddings,
    bbox: &BoundingBox,
    indicator: Indicator,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
    z_t_init: &Tensor,
    rng: &mut Rng,
) -> Result<Tensor> {
    sampler.validate(sched)?;
    let ts = ddim_timesteps(sched.steps(), sampler.ddim_steps);
    let mut z = z_t_init.clone();
    for (i, &t) in ts.iter().enumerate() {
        let input = assemble_input(&z, bg_latent, bbox, indicator, t, model.latent_factor())?;
        let eps_c = model.predict(&input, emb, bbox, indicator, false)?;
        let eps = if sampler.guidance_scale == 1.0 {
            eps_c
        } else {
            let eps_u = model.predict(&input, emb, bbox, indicator, true)?;
            cfg_combine(&eps_u, &eps_c, sampler.guidance_scale)?
        };
        let noise = if sampler.eta > 0.0 { Some(Tensor::randn(z.shape(), rng)) } else { None };
        z = ddim_step(&z, &eps, t, ts.get(i + 1).copied(), sched, sampler.eta, noise.as_ref())?;
    }
    Ok(z)
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// `[3, H, W]` in `[−1, 1]`.
    pub image: Tensor,
    pub z_t_hash: String,
}

/// Composes `foreground` into `background` at `bbox`. The box region of
/// the background is filled with 0 before encoding, as in training.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    model: &Model,
    background: &Tensor,
    foreground: &Tensor,
    bbox: &BoundingBox,
    indicator: Indicator,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<SampleOutput> {
    let enc = &model.config.encoder;
    expect_image(background, enc.image_size, "background")?;
    let (c, _, _) = foreground.dims3()?;
    if c != 3 {
        return Err(Error::shape("foreground must have 3 channels"));
    }
    let fg = resize_bilinear(foreground, enc.fg_size, enc.fg_size)?;
    let mut bg = background.clone();
    let span = bbox.pixel_span(enc.image_size, enc.image_size);
    for ch in 0..3 {
        for r in span.r0..span.r1 {
            for col in span.c0..span.c1 {
                bg.set3(ch, r, col, 0.0);
            }
        }
    }
    let bg_latent = model.ae.encode(&model.store, &bg, LatentSource::Background)?.values;
    let emb = model.embed_foreground(&fg)?;
    let n = enc.latent_size();
    let z_t = Tensor::randn(&[LATENT_CHANNELS, n, n], &mut Rng::substream(seed, "z_T", 0));
    let hash = noise_hash(&z_t);
    let mut rng = Rng::substream(seed, "ddim-eta", 0);
    let z0 = sample_latent(model, &bg_latent, &emb, bbox, indicator, sampler, sched, &z_t, &mut rng)?;
    Ok(SampleOutput { image: model.ae.decode(&model.store, &z0)?, z_t_hash: hash })
}
