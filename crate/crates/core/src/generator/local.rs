use crate::error::{Error, Result};
use crate::generator::{indicator_map, Indicator};
use crate::geometry::BoundingBox;
use crate::numerics::nn::{Conv2d, Linear};
use crate::numerics::{ParamStore, Rng, Session, Tensor, Var};

/// Spatially varying scale and shift of normalized synthesized features,
/// predicted from attention-aligned local embeddings.
#[derive(Clone, Debug)]
pub struct FeatureModulation {
    pub conv_gamma: Conv2d,
    pub conv_beta: Conv2d,
    pub groups: usize,
}

impl FeatureModulation {
    /// Both convolutions start at zero, so the module initially outputs zero.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        local_dim: usize,
        channels: usize,
        groups: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv_gamma: Conv2d::new(store, &format!("{name}.conv_gamma"), local_dim, channels, 3, 1, true, rng)?,
            conv_beta: Conv2d::new(store, &format!("{name}.conv_beta"), local_dim, channels, 3, 1, true, rng)?,
            groups,
        })
    }

    /// `norm(F̃) ⊙ conv_γ(Ẽ) + conv_β(Ẽ)` with `Ẽ = reshape(A·E_l)`.
    ///
    /// `synth` is `[c,p,p]`, `attn` is `[p², n_p]`, `local` is `[n_p, d_l]`.
    pub fn forward(&self, s: &mut Session, synth: Var, attn: Var, local: Var) -> Result<Var> {
        let (_, p, _) = s.value(synth).dims3()?;
        let (_, d_l) = s.value(local).dims2()?;
        let aligned = s.graph.matmul(attn, local, false)?;
        let aligned = s.graph.transpose(aligned)?;
        let aligned = s.graph.reshape(aligned, &[d_l, p, p])?;
        let gamma = self.conv_gamma.forward(s, aligned)?;
        let beta = self.conv_beta.forward(s, aligned)?;
        let normed = s.graph.group_norm(synth, self.groups, 1e-5)?;
        let scaled = s.graph.mul(normed, gamma)?;
        s.graph.add(scaled, beta)
    }

    pub fn apply(&self, store: &ParamStore, synth: &Tensor, attn: &Tensor, local: &Tensor) -> Result<Tensor> {
        let mut s = Session::new(store);
        let (f, a, e) = (s.constant(synth.clone())?, s.constant(attn.clone())?, s.constant(local.clone())?);
        let out = self.forward(&mut s, f, a, e)?;
        Ok(s.value(out).clone())
    }
}

/// Box-scoped fusion of local foreground embeddings into a feature map.
#[derive(Clone, Debug)]
pub struct LocalEnhancement {
    pub fuse: Conv2d,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub modulation: Option<FeatureModulation>,
    pub p: usize,
    pub channels: usize,
}

impl LocalEnhancement {
    /// With modulation the output projection is random and the modulation
    /// convolutions start at zero; without it the output projection starts
    /// at zero. Either way an untrained module adds nothing.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        local_dim: usize,
        p: usize,
        with_modulation: bool,
        groups: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let c = channels;
        Ok(Self {
            fuse: Conv2d::new(store, &format!("{name}.fuse"), c + 2, c, 3, 1, false, rng)?,
            q: Linear::new(store, &format!("{name}.q"), c, c, false, false, rng)?,
            k: Linear::new(store, &format!("{name}.k"), local_dim, c, false, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), local_dim, c, false, false, rng)?,
            out: Linear::new(store, &format!("{name}.out"), c, c, true, !with_modulation, rng)?,
            modulation: if with_modulation {
                Some(FeatureModulation::new(store, &format!("{name}.fm"), local_dim, c, groups, rng)?)
            } else {
                None
            },
            p,
            channels,
        })
    }

    /// Returns the enhanced `[c,h,w]` map and the attention map `[p², n_p]`.
    pub fn forward(
        &self,
        s: &mut Session,
        feat: Var,
        local: Var,
        indicator: Indicator,
        bbox: &BoundingBox,
    ) -> Result<(Var, Var)> {
        let (c, _, _) = s.value(feat).dims3()?;
        if c != self.channels {
            return Err(Error::shape(format!("local enhancement for {} channels got {c}", self.channels)));
        }
        let p = self.p;
        let region = s.graph.roi_align(feat, bbox, p)?;
        let ind = s.constant(indicator_map(indicator, p, p))?;
        let stacked = s.graph.concat(&[region, ind])?;
        let fused = self.fuse.forward(s, stacked)?;
        let flat = s.graph.reshape(fused, &[c, p * p])?;
        let tokens = s.graph.transpose(flat)?;
        let q = self.q.forward(s, tokens)?;
        let k = self.k.forward(s, local)?;
        let v = self.v.forward(s, local)?;
        let logits = s.graph.matmul(q, k, true)?;
        let logits = s.graph.scale(logits, 1.0 / (c as f64).sqrt())?;
        let attn = s.graph.softmax_rows(logits)?;
        let mixed = s.graph.matmul(attn, v, false)?;
        let synth = self.out.forward(s, mixed)?;
        let synth = s.graph.transpose(synth)?;
        let mut synth = s.graph.reshape(synth, &[c, p, p])?;
        if let Some(fm) = &self.modulation {
            synth = fm.forward(s, synth, attn, local)?;
        }
        Ok((s.graph.box_add(feat, synth, bbox)?, attn))
    }

    /// Value-level [`Self::forward`].
    pub fn apply(
        &self,
        store: &ParamStore,
        feat: &Tensor,
        local: &Tensor,
        indicator: Indicator,
        bbox: &BoundingBox,
    ) -> Result<(Tensor, Tensor)> {
        let mut s = Session::new(store);
        let (f, l) = (s.constant(feat.clone())?, s.constant(local.clone())?);
        let (out, attn) = self.forward(&mut s, f, l, indicator, bbox)?;
        Ok((s.value(out).clone(), s.value(attn).clone()))
    }
}
