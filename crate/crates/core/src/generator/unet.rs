use crate::encoders::{EncoderConfig, LATENT_CHANNELS};
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, Indicator, LocalEnhancement, UNetInput, INPUT_CHANNELS};
use crate::geometry::BoundingBox;
use crate::numerics::nn::{Attention, Conv2d, GroupNorm, LayerNorm, Linear, Mlp};
use crate::numerics::{ParamStore, Rng, Session, Tensor, Var};

/// Conditioning handed to every forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning {
    /// `[1, d_g]` — the real or the null global embedding.
    pub global: Var,
    /// `[n_p, d_l]`
    pub local: Var,
    pub indicator: Indicator,
    pub bbox: BoundingBox,
    /// Run the local-enhancement modules (when the variant has them).
    pub local_enhancement: bool,
}

/// Cross-attention from feature tokens to the foreground context, added
/// back residually. The output projection starts at zero.
#[derive(Clone, Debug)]
pub struct GlobalFusion {
    pub norm: LayerNorm,
    pub attn: Attention,
}

impl GlobalFusion {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, context_dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), channels)?,
            attn: Attention::new(store, &format!("{name}.attn"), channels, context_dim, channels, true, rng)?,
        })
    }

    /// `tokens` is `[hw, c]`, `context` is `[m, d_g]`.
    pub fn forward(&self, s: &mut Session, tokens: Var, context: Var) -> Result<Var> {
        let n = self.norm.forward(s, tokens)?;
        let (a, _) = self.attn.forward(s, n, context)?;
        s.graph.add(tokens, a)
    }

    /// Value-level fusion with a single global embedding `[d_g]`.
    pub fn apply(&self, store: &ParamStore, tokens: &Tensor, global: &Tensor) -> Result<Tensor> {
        let mut s = Session::new(store);
        let t = s.constant(tokens.clone())?;
        let g = s.constant(global.clone().reshape(&[1, global.len()])?)?;
        let out = self.forward(&mut s, t, g)?;
        Ok(s.value(out).clone())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, cfg: &GeneratorConfig, rng: &mut Rng) -> Result<Self> {
        let g = cfg.norm_groups;
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), g, cin)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, false, rng)?,
            time: Linear::new(store, &format!("{name}.time"), cfg.time_embed_dim, cout, true, false, rng)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), g, cout)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, false, rng)?,
            skip: if cin != cout {
                Some(Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, false, rng)?)
            } else {
                None
            },
        })
    }

    /// `temb` is the already activated `[1, time_embed_dim]` embedding.
    fn forward(&self, s: &mut Session, x: Var, temb: Var) -> Result<Var> {
        let mut h = self.norm1.forward(s, x)?;
        h = s.graph.silu(h)?;
        h = self.conv1.forward(s, h)?;
        let tb = self.time.forward(s, temb)?;
        let c = s.value(tb).len();
        let tb = s.graph.reshape(tb, &[c])?;
        h = s.graph.add_channel(h, tb)?;
        h = self.norm2.forward(s, h)?;
        h = s.graph.silu(h)?;
        h = self.conv2.forward(s, h)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(s, x)?,
            None => x,
        };
        s.graph.add(h, skip)
    }
}

#[derive(Clone, Debug)]
struct TransformerBlock {
    norm1: LayerNorm,
    self_attn: Attention,
    fusion: GlobalFusion,
    norm3: LayerNorm,
    ff: Mlp,
}

impl TransformerBlock {
    fn new(store: &mut ParamStore, name: &str, c: usize, context_dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c)?,
            self_attn: Attention::new(store, &format!("{name}.self_attn"), c, c, c, false, rng)?,
            fusion: GlobalFusion::new(store, &format!("{name}.fusion"), c, context_dim, rng)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), c)?,
            ff: Mlp::new(store, &format!("{name}.ff"), &[c, 2 * c, c], rng)?,
        })
    }

    fn forward(&self, s: &mut Session, x: Var, context: Var) -> Result<Var> {
        let (c, h, w) = s.value(x).dims3()?;
        let flat = s.graph.reshape(x, &[c, h * w])?;
        let mut t = s.graph.transpose(flat)?;
        let n = self.norm1.forward(s, t)?;
        let (a, _) = self.self_attn.forward(s, n, n)?;
        t = s.graph.add(t, a)?;
        t = self.fusion.forward(s, t, context)?;
        let n = self.norm3.forward(s, t)?;
        let f = self.ff.forward(s, n)?;
        t = s.graph.add(t, f)?;
        let back = s.graph.transpose(t)?;
        s.graph.reshape(back, &[c, h, w])
    }
}

/// Residual block, then optional transformer block, then optional local
/// enhancement.
#[derive(Clone, Debug)]
struct Stage {
    res: ResBlock,
    attn: Option<TransformerBlock>,
    le: Option<LocalEnhancement>,
}

impl Stage {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        res: usize,
        cfg: &GeneratorConfig,
        enc: &EncoderConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let res_block = ResBlock::new(store, &format!("{name}.res"), cin, cout, cfg, rng)?;
        let attn = if cfg.attention_resolutions.contains(&res) {
            Some(TransformerBlock::new(store, &format!("{name}.attn"), cout, enc.global_dim, rng)?)
        } else {
            None
        };
        let le = if cfg.ablation.uses_local_enhancement() && cfg.le_resolutions.contains(&res) {
            Some(LocalEnhancement::new(
                store,
                &format!("{name}.le"),
                cout,
                enc.local_dim(),
                cfg.p,
                cfg.ablation.uses_modulation(),
                cfg.norm_groups,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self { res: res_block, attn, le })
    }

    fn forward(&self, s: &mut Session, x: Var, temb: Var, context: Var, cond: &Conditioning) -> Result<Var> {
        let mut h = self.res.forward(s, x, temb)?;
        if let Some(a) = &self.attn {
            h = a.forward(s, h, context)?;
        }
        if let (Some(le), true) = (&self.le, cond.local_enhancement) {
            h = le.forward(s, h, cond.local, cond.indicator, &cond.bbox)?.0;
        }
        Ok(h)
    }
}

/// The noise predictor `ε_θ`.
#[derive(Clone, Debug)]
pub struct UNet {
    cfg: GeneratorConfig,
    latent_size: usize,
    time_in: Option<Linear>,
    time_out: Option<Linear>,
    stem: Conv2d,
    down: Vec<Stage>,
    downsample: Vec<Conv2d>,
    mid: Option<(ResBlock, Option<TransformerBlock>, ResBlock)>,
    up: Vec<Stage>,
    upsample: Vec<Conv2d>,
    head_norm: GroupNorm,
    head: Conv2d,
    patch_proj: Option<Linear>,
}

impl UNet {
    pub fn new(store: &mut ParamStore, enc: &EncoderConfig, cfg: &GeneratorConfig, rng: &mut Rng) -> Result<Self> {
        let latent_size = enc.latent_size();
        cfg.validate(latent_size)?;
        let b = cfg.base_channels;
        let levels = cfg.channel_multipliers.len();
        let res = cfg.level_resolutions(latent_size);
        let (time_in, time_out) = if levels > 0 {
            (
                Some(Linear::new(store, "unet.time.0", b, cfg.time_embed_dim, true, false, rng)?),
                Some(Linear::new(store, "unet.time.1", cfg.time_embed_dim, cfg.time_embed_dim, true, false, rng)?),
            )
        } else {
            (None, None)
        };
        let stem = Conv2d::new(store, "unet.stem", INPUT_CHANNELS, b, 3, 1, false, rng)?;

        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut widths = Vec::new();
        let mut ch = b;
        for (i, &m) in cfg.channel_multipliers.iter().enumerate() {
            let cout = b * m;
            down.push(Stage::new(store, &format!("unet.down{i}"), ch, cout, res[i], cfg, enc, rng)?);
            widths.push(cout);
            ch = cout;
            if i + 1 < levels {
                downsample.push(Conv2d::new(store, &format!("unet.downsample{i}"), ch, ch, 3, 2, false, rng)?);
            }
        }

        let mid = if levels > 0 {
            let low = res[levels - 1];
            Some((
                ResBlock::new(store, "unet.mid.res0", ch, ch, cfg, rng)?,
                if cfg.attention_resolutions.contains(&low) {
                    Some(TransformerBlock::new(store, "unet.mid.attn", ch, enc.global_dim, rng)?)
                } else {
                    None
                },
                ResBlock::new(store, "unet.mid.res1", ch, ch, cfg, rng)?,
            ))
        } else {
            None
        };

        let mut up = Vec::new();
        let mut upsample = Vec::new();
        for i in (0..levels).rev() {
            let cout = b * cfg.channel_multipliers[i];
            up.push(Stage::new(store, &format!("unet.up{i}"), ch + widths[i], cout, res[i], cfg, enc, rng)?);
            ch = cout;
            if i > 0 {
                upsample.push(Conv2d::new(store, &format!("unet.upsample{i}"), ch, ch, 3, 1, false, rng)?);
            }
        }

        let head_norm = GroupNorm::new(store, "unet.head_norm", cfg.norm_groups, ch)?;
        let head = Conv2d::new(store, "unet.head", ch, LATENT_CHANNELS, 3, 1, true, rng)?;
        let patch_proj = if cfg.ablation.all_tokens_context() {
            Some(Linear::new(store, "unet.patch_proj", enc.local_dim(), enc.global_dim, true, false, rng)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            latent_size,
            time_in,
            time_out,
            stem,
            down,
            downsample,
            mid,
            up,
            upsample,
            head_norm,
            head,
            patch_proj,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Sinusoidal `[1, dim]` encoding of a timestep.
    pub fn timestep_features(t: usize, dim: usize) -> Tensor {
        let half = dim / 2;
        Tensor::from_fn(&[1, dim], |i| {
            let k = i % half.max(1);
            let freq = (-(10000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            let a = t as f64 * freq;
            if i < half {
                a.sin()
            } else {
                a.cos()
            }
        })
    }

    /// Predicted noise `[4, h, w]`.
    pub fn forward(&self, s: &mut Session, input: &UNetInput, cond: &Conditioning) -> Result<Var> {
        let (_, h, w) = input.z_t.dims3()?;
        if h != self.latent_size || w != self.latent_size {
            return Err(Error::shape(format!("latent {h}x{w}, model built for {}", self.latent_size)));
        }
        let mut stacked = input.stacked()?;
        if !self.cfg.ablation.uses_indicator() {
            let plane = h * w;
            stacked.data_mut()[(INPUT_CHANNELS - 2) * plane..].iter_mut().for_each(|v| *v = 0.0);
        }
        let x = s.constant(stacked)?;

        let context = match &self.patch_proj {
            Some(proj) => {
                let tokens = proj.forward(s, cond.local)?;
                s.graph.concat(&[cond.global, tokens])?
            }
            None => cond.global,
        };

        let mut hcur = self.stem.forward(s, x)?;
        let (Some(time_in), Some(time_out), Some(mid)) = (&self.time_in, &self.time_out, &self.mid) else {
            let n = self.head_norm.forward(s, hcur)?;
            let n = s.graph.silu(n)?;
            return self.head.forward(s, n);
        };
        let tf = s.constant(Self::timestep_features(input.t, self.cfg.base_channels))?;
        let mut temb = time_in.forward(s, tf)?;
        temb = s.graph.silu(temb)?;
        temb = time_out.forward(s, temb)?;
        let temb = s.graph.silu(temb)?;

        let mut skips = Vec::new();
        for (i, stage) in self.down.iter().enumerate() {
            hcur = stage.forward(s, hcur, temb, context, cond)?;
            skips.push(hcur);
            if let Some(ds) = self.downsample.get(i) {
                hcur = ds.forward(s, hcur)?;
            }
        }
        hcur = mid.0.forward(s, hcur, temb)?;
        if let Some(a) = &mid.1 {
            hcur = a.forward(s, hcur, context)?;
        }
        hcur = mid.2.forward(s, hcur, temb)?;
        for (j, stage) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            let cat = s.graph.concat(&[hcur, skip])?;
            hcur = stage.forward(s, cat, temb, context, cond)?;
            if let Some(us) = self.upsample.get(j) {
                hcur = s.graph.upsample2(hcur)?;
                hcur = us.forward(s, hcur)?;
            }
        }
        let n = self.head_norm.forward(s, hcur)?;
        let n = s.graph.silu(n)?;
        self.head.forward(s, n)
    }
}
