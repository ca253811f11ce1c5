use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::TrainingTuple;
use crate::diffusion::{forward_noise, NoisePredictor, NoiseSchedule};
use crate::encoders::{ForegroundEmbeddings, LatentSource};
use crate::error::{Error, Result};
use crate::generator::{assemble_input, Indicator};
use crate::geometry::BoundingBox;
use crate::model::Model;
use crate::numerics::container::{load_map, save_map};
use crate::numerics::kernels::resize_bilinear;
use crate::numerics::{Adam, ParamGrads, Rng, Session, Tensor, Var};

/// A training tuple with its frozen-autoencoder latents cached.
#[derive(Clone, Debug)]
pub struct PreparedTuple {
    pub id: String,
    /// `E(I_c)`
    pub z0: Tensor,
    /// `E(I_b)`
    pub bg_latent: Tensor,
    /// `[3, fg_size, fg_size]`
    pub foreground: Tensor,
    pub bbox: BoundingBox,
    pub indicator: Indicator,
}

pub fn prepare_tuples(model: &Model, tuples: &[TrainingTuple]) -> Result<Vec<PreparedTuple>> {
    let fg_size = model.config.encoder.fg_size;
    tuples
        .iter()
        .map(|t| {
            Ok(PreparedTuple {
                id: t.id.clone(),
                z0: model.ae.encode(&model.store, &t.composite, LatentSource::Composite)?.values,
                bg_latent: model.ae.encode(&model.store, &t.background, LatentSource::Background)?.values,
                foreground: resize_bilinear(&t.foreground, fg_size, fg_size)?,
                bbox: t.bbox,
                indicator: t.indicator,
            })
        })
        .collect()
}

/// Per-sample randomness of one training example.
#[derive(Clone, Debug)]
pub struct SampleDraw {
    pub t: usize,
    pub eps: Tensor,
    /// Replace the global embedding by the null embedding.
    pub drop_global: bool,
}

/// Draws for the `index`-th example seen in a run; a pure function of
/// `(seed, index)`.
pub fn sample_draw(seed: u64, index: u64, steps: usize, drop_prob: f64, shape: &[usize]) -> SampleDraw {
    let mut rng = Rng::substream(seed, "train-sample", index);
    let t = rng.below(steps);
    let drop_global = rng.bernoulli(drop_prob);
    let eps = Tensor::randn(shape, &mut rng);
    SampleDraw { t, eps, drop_global }
}

/// Denoising loss `‖ε − ε_θ(z_t, …)‖²` (mean over elements) on the tape.
pub fn loss_g(
    model: &Model,
    s: &mut Session,
    tuple: &PreparedTuple,
    t: usize,
    eps: &Tensor,
    drop_global: bool,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let z_t = forward_noise(&tuple.z0, t, eps, sched)?;
    let input = assemble_input(
        &z_t,
        &tuple.bg_latent,
        &tuple.bbox,
        tuple.indicator,
        t,
        model.config.encoder.latent_factor,
    )?;
    let fg = model.fg_vars(s, &tuple.foreground, drop_global)?;
    let pred = model.unet_forward(s, &input, fg.global, fg.local, &tuple.bbox, tuple.indicator, true)?;
    let target = s.constant(eps.clone())?;
    s.graph.mse(pred, target)
}

/// The same loss for an arbitrary predictor, without gradients.
pub fn noise_prediction_loss(
    predictor: &dyn NoisePredictor,
    tuple: &PreparedTuple,
    emb: &ForegroundEmbeddings,
    t: usize,
    eps: &Tensor,
    drop_global: bool,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let z_t = forward_noise(&tuple.z0, t, eps, sched)?;
    let input = assemble_input(&z_t, &tuple.bg_latent, &tuple.bbox, tuple.indicator, t, predictor.latent_factor())?;
    let pred = predictor.predict(&input, emb, &tuple.bbox, tuple.indicator, drop_global)?;
    let d = pred.sub(eps)?;
    Ok(d.sq_norm() / d.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 1e-4, batch: 8, seed: 0 }
    }
}

/// Resumable progress of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    /// Mean loss of every completed epoch.
    pub loss_curve: Vec<f64>,
}

pub const TRAIN_STATE_FILE: &str = "train_state.json";
pub const OPTIMIZER_FILE: &str = "optimizer.cctm";

impl TrainState {
    pub fn save(&self, dir: &Path, opt: &Adam, model: &Model) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(TRAIN_STATE_FILE), serde_json::to_string_pretty(self)?)?;
        save_map(&dir.join(OPTIMIZER_FILE), &opt.state_map(&model.store))
    }

    pub fn load(dir: &Path, model: &Model, lr: f64) -> Result<(Self, Adam)> {
        let path = dir.join(TRAIN_STATE_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::State(format!("no training state at {}: {e}", path.display())))?;
        let state: Self = serde_json::from_str(&text)?;
        let mut opt = Adam::new(lr);
        opt.load_state_map(&model.store, &load_map(&dir.join(OPTIMIZER_FILE))?, state.step);
        Ok((state, opt))
    }
}

/// Interleaves the four tasks: each task's tuples are shuffled, then taken
/// round-robin so every window of four consecutive slots covers all tasks
/// while they last.
pub fn balanced_order(data: &[PreparedTuple], rng: &mut Rng) -> Vec<usize> {
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); 4];
    for (i, t) in data.iter().enumerate() {
        groups[t.indicator.index()].push(i);
    }
    for g in &mut groups {
        rng.shuffle(g);
    }
    let longest = groups.iter().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(data.len());
    for k in 0..longest {
        for g in &groups {
            if let Some(&i) = g.get(k) {
                order.push(i);
            }
        }
    }
    order
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub optimizer: Adam,
}

#[derive(Serialize)]
struct LogLine<'a> {
    step: u64,
    loss: f64,
    task_indicator: &'a str,
}

/// Adam on the denoising loss. Runs until `state.epoch == cfg.epochs`,
/// continuing from `resume` if given. Per-example losses go to `log` as
/// JSON lines.
pub fn train(
    model: &mut Model,
    data: &[PreparedTuple],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    resume: Option<(TrainState, Adam)>,
    log: Option<&PathBuf>,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::config("training needs a non-empty dataset"));
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::config("batch size and learning rate must be positive"));
    }
    model.apply_trainability();
    let (mut state, mut opt) = resume.unwrap_or_else(|| (TrainState::default(), Adam::new(cfg.lr)));
    opt.lr = cfg.lr;
    let mut log = match log {
        Some(p) => Some(std::io::BufWriter::new(
            std::fs::OpenOptions::new().create(true).append(true).open(p)?,
        )),
        None => None,
    };
    let drop_prob = model.config.generator.cfg_drop_prob;
    let shape = data[0].z0.shape().to_vec();
    while state.epoch < cfg.epochs {
        let mut rng = Rng::substream(cfg.seed, "epoch-order", state.epoch as u64);
        let order = balanced_order(data, &mut rng);
        let mut epoch_total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut grads = ParamGrads::zeros_like(&model.store);
            for (slot, &i) in chunk.iter().enumerate() {
                let index = state.step * cfg.batch as u64 + slot as u64;
                let draw = sample_draw(cfg.seed, index, sched.steps(), drop_prob, &shape);
                let mut s = Session::new(&model.store);
                let loss = loss_g(model, &mut s, &data[i], draw.t, &draw.eps, draw.drop_global, sched)?;
                let l = s.value(loss).item();
                if !(l <= 1e3) {
                    return Err(Error::Training(format!("loss {l} at step {} diverged", state.step)));
                }
                grads.accumulate(&s.backward(loss)?)?;
                epoch_total += l;
                if let Some(w) = log.as_mut() {
                    let line = LogLine {
                        step: state.step,
                        loss: l,
                        task_indicator: &data[i].indicator.to_string(),
                    };
                    writeln!(w, "{}", serde_json::to_string(&line)?)?;
                }
            }
            grads.scale(1.0 / chunk.len() as f64);
            opt.update(&mut model.store, &grads)?;
            state.step += 1;
        }
        state.loss_curve.push(epoch_total / data.len() as f64);
        state.epoch += 1;
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    Ok(TrainOutcome { state, optimizer: opt })
}
