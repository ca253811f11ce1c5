//! Noise schedule, forward process, guided DDIM sampling and training.

mod sampler;
mod train;

pub use sampler::{ddim_timesteps, noise_hash, sample, sample_latent, SampleOutput, SamplerConfig};
pub use train::{
    balanced_order, loss_g, noise_prediction_loss, prepare_tuples, sample_draw, train, PreparedTuple, SampleDraw,
    TrainConfig, TrainOutcome, TrainState,
};

use serde::{Deserialize, Serialize};

use crate::encoders::ForegroundEmbeddings;
use crate::error::{Error, Result};
use crate::generator::{Indicator, UNetInput};
use crate::geometry::BoundingBox;
use crate::numerics::Tensor;

/// Anything that predicts the noise in a U-Net input.
pub trait NoisePredictor {
    /// With `unconditional`, the global embedding is replaced by the null
    /// embedding.
    fn predict(
        &self,
        input: &UNetInput,
        emb: &ForegroundEmbeddings,
        bbox: &BoundingBox,
        indicator: Indicator,
        unconditional: bool,
    ) -> Result<Tensor>;

    /// Image-to-latent downsampling factor, used to rasterize box masks.
    fn latent_factor(&self) -> usize {
        1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    ScaledLinear,
    /// Built from explicit betas.
    Custom,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub betas: Vec<f64>,
    /// `ᾱ_t = Π_{i≤t} (1 − β_i)`
    pub alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        Self::build(ScheduleKind::Custom, betas)
    }

    fn build(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("schedule needs at least one step"));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::config("every beta must lie in (0,1)"));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config("betas must be non-decreasing"));
        }
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { kind, betas, alphas_cumprod })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or_else(|| Error::config(format!("timestep {t} outside [0, {})", self.steps())))
    }
}

impl Default for NoiseSchedule {
    /// Scaled-linear, 1000 steps, β from 0.00085 to 0.012.
    fn default() -> Self {
        make_schedule(ScheduleKind::ScaledLinear, 1000, 0.00085, 0.012).expect("valid default schedule")
    }
}

pub fn make_schedule(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::config(format!("need 0 < {beta_start} < {beta_end} < 1")));
    }
    if steps == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    let lerp = |a: f64, b: f64, i: usize| {
        if steps == 1 {
            a
        } else {
            a + (b - a) * i as f64 / (steps - 1) as f64
        }
    };
    let betas = match kind {
        ScheduleKind::Linear => (0..steps).map(|i| lerp(beta_start, beta_end, i)).collect(),
        ScheduleKind::ScaledLinear => (0..steps)
            .map(|i| lerp(beta_start.sqrt(), beta_end.sqrt(), i).powi(2))
            .collect(),
        ScheduleKind::Custom => return Err(Error::config("custom schedules are built from explicit betas")),
    };
    NoiseSchedule::build(kind, betas)
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn forward_noise(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// `ε_u + s·(ε_c − ε_u)`, evaluated as `(1−s)·ε_u + s·ε_c` so that `s = 0`
/// and `s = 1` return the inputs exactly.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, s: f64) -> Result<Tensor> {
    eps_uncond.zip_map(eps_cond, |u, c| (1.0 - s) * u + s * c)
}

/// One DDIM update from `t` to `t_prev` (`None` means the clean end point,
/// `ᾱ = 1`). With `eta > 0`, `noise` supplies the fresh Gaussian draw.
pub fn ddim_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    let ab_prev = match t_prev {
        Some(tp) if tp >= t => return Err(Error::config(format!("DDIM step must go backwards ({t} -> {tp})"))),
        Some(tp) => sched.alpha_bar(tp)?,
        None => 1.0,
    };
    let pred_x0 = z_t.zip_map(eps_hat, |z, e| (z - (1.0 - ab).sqrt() * e) / ab.sqrt())?;
    let sigma = if eta > 0.0 {
        eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt()
    } else {
        0.0
    };
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = pred_x0.zip_map(eps_hat, |x, e| ab_prev.sqrt() * x + dir * e)?;
    if sigma > 0.0 {
        let n = noise.ok_or_else(|| Error::config("stochastic DDIM step needs a noise tensor"))?;
        out = out.zip_map(n, |o, v| o + sigma * v)?;
    }
    Ok(out)
}
