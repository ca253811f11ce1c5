use crate::encoders::{expect_image, EncoderConfig, ForegroundEmbeddings};
use crate::error::Result;
use crate::numerics::nn::{Attention, Init, LayerNorm, Linear, Mlp};
use crate::numerics::{ParamId, ParamStore, Rng, Session, Tensor, Var};

/// Splits a `[3, S, S]` image into row-major `[n_p, 3·P·P]` patch vectors.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let (gh, gw) = (h / patch, w / patch);
    let dim = c * patch * patch;
    Ok(Tensor::from_fn(&[gh * gw, dim], |i| {
        let (pi, k) = (i / dim, i % dim);
        let (pr, pc) = (pi / gw, pi % gw);
        let (ch, r, col) = (k / (patch * patch), (k / patch) % patch, k % patch);
        image.at3(ch, pr * patch + r, pc * patch + col)
    }))
}

#[derive(Clone, Debug)]
struct VitBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: Mlp,
}

impl VitBlock {
    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let n = self.ln1.forward(s, x)?;
        let (a, _) = self.attn.forward(s, n, n)?;
        let x = s.graph.add(x, a)?;
        let n = self.ln2.forward(s, x)?;
        let f = self.ff.forward(s, n)?;
        s.graph.add(x, f)
    }
}

/// Graph handles of the foreground embeddings.
#[derive(Clone, Copy, Debug)]
pub struct FgVars {
    /// `[1, d_g]`
    pub global: Var,
    /// `[n_p, d_l]`
    pub local: Var,
}

/// ViT-style encoder: the class token after the deep block, passed through
/// an MLP, is the global embedding; patch tokens after the shallow block are
/// the local embeddings.
#[derive(Clone, Debug)]
pub struct ForegroundEncoder {
    patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    blocks: Vec<VitBlock>,
    head_norm: LayerNorm,
    head: Mlp,
    /// Learned replacement for the global embedding (classifier-free drop).
    pub null_global: ParamId,
    cfg: EncoderConfig,
}

impl ForegroundEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.vit_width;
        let n_p = cfg.num_patches();
        let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
        let patch_embed = Linear::new(store, "fg.patch_embed", patch_dim, w, true, false, rng)?;
        let cls = store.add("fg.cls", Init::Normal(0.02).tensor(&[1, w], rng))?;
        let pos = store.add("fg.pos", Init::Normal(0.02).tensor(&[n_p + 1, w], rng))?;
        // Blocks past the deep tap would never influence an output.
        let blocks = (0..cfg.deep_layer_index)
            .map(|i| {
                let name = format!("fg.block{i}");
                Ok(VitBlock {
                    ln1: LayerNorm::new(store, &format!("{name}.ln1"), w)?,
                    attn: Attention::new(store, &format!("{name}.attn"), w, w, w, false, rng)?,
                    ln2: LayerNorm::new(store, &format!("{name}.ln2"), w)?,
                    ff: Mlp::new(store, &format!("{name}.ff"), &[w, 2 * w, w], rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let head_norm = LayerNorm::new(store, "fg.head_norm", w)?;
        let mut dims = vec![w];
        dims.extend(std::iter::repeat_n(cfg.global_dim, cfg.mlp_layers));
        let head = Mlp::new(store, "fg.head", &dims, rng)?;
        let null_global = store.add("fg.null_global", Tensor::zeros(&[cfg.global_dim]))?;
        Ok(Self { patch_embed, cls, pos, blocks, head_norm, head, null_global, cfg: cfg.clone() })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Runs the encoder on a `[3, fg_size, fg_size]` image.
    pub fn forward(&self, s: &mut Session, image: &Tensor) -> Result<FgVars> {
        expect_image(image, self.cfg.fg_size, "foreground")?;
        let n_p = self.cfg.num_patches();
        let patches = s.constant(patchify(image, self.cfg.patch_size)?)?;
        let tokens = self.patch_embed.forward(s, patches)?;
        let cls = s.param(self.cls)?;
        let mut x = s.graph.concat(&[cls, tokens])?;
        let pos = s.param(self.pos)?;
        x = s.graph.add(x, pos)?;
        let mut local = None;
        for (i, b) in self.blocks.iter().enumerate() {
            x = b.forward(s, x)?;
            if i + 1 == self.cfg.shallow_layer_index {
                local = Some(s.graph.slice_rows(x, 1, n_p + 1)?);
            }
        }
        let cls_out = s.graph.slice_rows(x, 0, 1)?;
        let n = self.head_norm.forward(s, cls_out)?;
        let global = self.head.forward(s, n)?;
        Ok(FgVars { global, local: local.expect("shallow index validated below deep index") })
    }

    /// The null embedding as a `[1, d_g]` graph value.
    pub fn null_var(&self, s: &mut Session) -> Result<Var> {
        let v = s.param(self.null_global)?;
        s.graph.reshape(v, &[1, self.cfg.global_dim])
    }

    pub fn encode(&self, store: &ParamStore, image: &Tensor) -> Result<ForegroundEmbeddings> {
        let mut s = Session::new(store);
        let v = self.forward(&mut s, image)?;
        Ok(ForegroundEmbeddings {
            global: s.value(v.global).clone().reshape(&[self.cfg.global_dim])?,
            local: s.value(v.local).clone(),
            null_global: false,
        })
    }

    pub fn null_embedding(&self, store: &ParamStore) -> Tensor {
        store.get(self.null_global).clone()
    }
}
