use crate::encoders::{expect_image, EncoderConfig, LatentCode, LatentSource, LATENT_CHANNELS};
use crate::error::{Error, Result};
use crate::numerics::nn::Conv2d;
use crate::numerics::{Adam, ParamGrads, ParamId, ParamStore, Rng, Session, Tensor, Var};

/// Deterministic convolutional autoencoder `E`/`D`.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    enc_in: Conv2d,
    downs: Vec<Conv2d>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    ups: Vec<Conv2d>,
    dec_out: Conv2d,
    /// Non-trainable multiplier that brings latents to roughly unit scale.
    pub latent_scale: ParamId,
    image_size: usize,
    factor: usize,
}

/// Outcome of reconstruction pretraining.
#[derive(Clone, Debug)]
pub struct ReconstructionRun {
    /// Mean squared reconstruction error per epoch.
    pub losses: Vec<f64>,
    /// Per-pixel mean absolute round-trip error after training.
    pub final_mae: f64,
    pub latent_scale: f64,
}

impl Autoencoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let c = cfg.ae_channels;
        let levels = cfg.latent_factor.trailing_zeros() as usize;
        let enc_in = Conv2d::new(store, "ae.enc.in", 3, c, 3, 1, false, rng)?;
        let downs = (0..levels)
            .map(|i| Conv2d::new(store, &format!("ae.enc.down{i}"), c, c, 3, 2, false, rng))
            .collect::<Result<_>>()?;
        let enc_out = Conv2d::new(store, "ae.enc.out", c, LATENT_CHANNELS, 1, 1, false, rng)?;
        let dec_in = Conv2d::new(store, "ae.dec.in", LATENT_CHANNELS, c, 3, 1, false, rng)?;
        let ups = (0..levels)
            .map(|i| Conv2d::new(store, &format!("ae.dec.up{i}"), c, c, 3, 1, false, rng))
            .collect::<Result<_>>()?;
        let dec_out = Conv2d::new(store, "ae.dec.out", c, 3, 3, 1, false, rng)?;
        let latent_scale = store.add("ae.latent_scale", Tensor::ones(&[1]))?;
        store.set_trainable("ae.latent_scale", false);
        Ok(Self {
            enc_in,
            downs,
            enc_out,
            dec_in,
            ups,
            dec_out,
            latent_scale,
            image_size: cfg.image_size,
            factor: cfg.latent_factor,
        })
    }

    fn scale(&self, s: &Session) -> f64 {
        s.store().get(self.latent_scale).item()
    }

    pub fn encode_var(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (_, h, w) = s.value(x).dims3()?;
        if h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::shape(format!("{h}x{w} image not divisible by {}", self.factor)));
        }
        let mut y = self.enc_in.forward(s, x)?;
        y = s.graph.silu(y)?;
        for d in &self.downs {
            y = d.forward(s, y)?;
            y = s.graph.silu(y)?;
        }
        let z = self.enc_out.forward(s, y)?;
        let k = self.scale(s);
        s.graph.scale(z, k)
    }

    pub fn decode_var(&self, s: &mut Session, z: Var) -> Result<Var> {
        let (c, _, _) = s.value(z).dims3()?;
        if c != LATENT_CHANNELS {
            return Err(Error::shape(format!("latent needs {LATENT_CHANNELS} channels, got {c}")));
        }
        let k = self.scale(s);
        let z = s.graph.scale(z, 1.0 / k)?;
        let mut y = self.dec_in.forward(s, z)?;
        y = s.graph.silu(y)?;
        for u in &self.ups {
            y = s.graph.upsample2(y)?;
            y = u.forward(s, y)?;
            y = s.graph.silu(y)?;
        }
        let out = self.dec_out.forward(s, y)?;
        s.graph.clamp(out, -1.0, 1.0)
    }

    pub fn encode(&self, store: &ParamStore, image: &Tensor, source: LatentSource) -> Result<LatentCode> {
        expect_image(image, self.image_size, "autoencoder input")?;
        let mut s = Session::new(store);
        let x = s.constant(image.clone())?;
        let z = self.encode_var(&mut s, x)?;
        LatentCode::new(s.value(z).clone(), source)
    }

    pub fn decode(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let mut s = Session::new(store);
        let zv = s.constant(z.clone())?;
        let out = self.decode_var(&mut s, zv)?;
        Ok(s.value(out).clone())
    }

    /// Trains `E`/`D` on reconstruction, then fixes the latent scale to the
    /// reciprocal latent root-mean-square and freezes the autoencoder.
    pub fn pretrain(
        &self,
        store: &mut ParamStore,
        images: &[Tensor],
        epochs: usize,
        batch: usize,
        lr: f64,
        seed: u64,
    ) -> Result<ReconstructionRun> {
        if images.is_empty() {
            return Err(Error::config("reconstruction pretraining needs images"));
        }
        store.set_trainable("ae.", true);
        store.set_trainable("ae.latent_scale", false);
        *store.get_mut(self.latent_scale) = Tensor::ones(&[1]);
        let mut rng = Rng::substream(seed, "ae-pretrain", 0);
        let mut opt = Adam::new(lr);
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut losses = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            rng.shuffle(&mut order);
            let mut total = 0.0;
            for chunk in order.chunks(batch.max(1)) {
                let mut grads = ParamGrads::zeros_like(store);
                for &i in chunk {
                    let mut s = Session::new(store);
                    let x = s.constant(images[i].clone())?;
                    let z = self.encode_var(&mut s, x)?;
                    let y = self.decode_var(&mut s, z)?;
                    let loss = s.graph.mse(y, x)?;
                    total += s.value(loss).item();
                    grads.accumulate(&s.backward(loss)?)?;
                }
                grads.scale(1.0 / chunk.len() as f64);
                opt.update(store, &grads)?;
            }
            losses.push(total / images.len() as f64);
        }

        let mut sq = 0.0;
        let mut n = 0usize;
        for img in images {
            let z = self.encode(store, img, LatentSource::Composite)?;
            sq += z.values.sq_norm();
            n += z.values.len();
        }
        let std = (sq / n as f64).sqrt();
        let latent_scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
        *store.get_mut(self.latent_scale) = Tensor::from_vec(vec![latent_scale]);
        store.set_trainable("ae.", false);

        let mut abs = 0.0;
        let mut count = 0usize;
        for img in images {
            let z = self.encode(store, img, LatentSource::Composite)?;
            let rec = self.decode(store, &z.values)?;
            abs += rec.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).sum::<f64>();
            count += img.len();
        }
        Ok(ReconstructionRun { losses, final_mae: abs / count as f64, latent_scale })
    }
}
