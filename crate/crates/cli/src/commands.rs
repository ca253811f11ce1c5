//! The four subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use controlcom::data::{build_dataset, load_dataset, load_png, save_png, MANIFEST_FILE};
use controlcom::diffusion::{prepare_tuples, sample, train, TrainState};
use controlcom::evaluation::{
    average_rank, bt_fit, format_rank_rows, masked_background_ssim, masked_fg_similarity, ItemScore, MetricReport,
    PairwiseTable, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW,
};
use controlcom::generator::Indicator;
use controlcom::model::Model;
use controlcom::numerics::kernels::resize_bilinear;
use controlcom::numerics::Tensor;
use controlcom::BoundingBox;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";
pub const LOSS_CURVE_FILE: &str = "loss.json";
pub const COMPOSE_LOG_FILE: &str = "compose.json";

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Fails with a usage error when `dir` cannot serve as an output directory.
fn ensure_output_dir(dir: &Path) -> Result<()> {
    if dir.exists() && !dir.is_dir() {
        return Err(CliError::Usage(format!("{} exists and is not a directory", dir.display())));
    }
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", dir.display())))
}

pub fn prepare(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.paths.dataset;
    ensure_output_dir(out)?;
    let manifest = build_dataset(&cfg.data, cfg.n_sources, cfg.seed, out)?;
    cfg.write_beside(out)?;
    println!("{} tuples from {} sources", manifest.tuples.len(), cfg.n_sources);
    for (task, n) in &manifest.task_counts {
        println!("  {task}: {n}");
    }
    println!("manifest sha256 {}", sha256_file(&out.join(MANIFEST_FILE))?);
    Ok(())
}

#[derive(Serialize)]
struct LossCurve<'a> {
    step: u64,
    epoch: usize,
    epoch_losses: &'a [f64],
}

pub fn train_cmd(cfg: &RunConfig, resume: bool) -> Result<()> {
    let ckpt = &cfg.paths.checkpoint;
    let sched = cfg.schedule.build()?;
    let (mut model, state) = if resume {
        let model = Model::load(ckpt)?;
        if model.config.generator.ablation != cfg.model.generator.ablation {
            return Err(CliError::Usage(format!(
                "checkpoint was trained as {:?}, not {:?}",
                model.config.generator.ablation, cfg.model.generator.ablation
            )));
        }
        let state = TrainState::load(ckpt, &model, cfg.train.lr)?;
        println!("resuming at step {} (epoch {})", state.0.step, state.0.epoch);
        (model, Some(state))
    } else {
        (Model::new(cfg.model.clone())?, None)
    };
    let plain = !model.config.generator.ablation.uses_augmented_data();
    let (_, tuples) = load_dataset(&cfg.paths.dataset, plain)?;
    if tuples.is_empty() {
        return Err(CliError::Usage("the dataset holds no tuples".into()));
    }
    ensure_output_dir(ckpt)?;
    if state.is_none() {
        let images: Vec<Tensor> = tuples.iter().flat_map(|t| [t.composite.clone(), t.background.clone()]).collect();
        let ae = model.ae.clone();
        let p = &cfg.ae_pretrain;
        let run = ae.pretrain(&mut model.store, &images, p.epochs, p.batch, p.lr, cfg.seed)?;
        println!("autoencoder: {} epochs, reconstruction MAE {:.4}", p.epochs, run.final_mae);
    }
    let prepared = prepare_tuples(&model, &tuples)?;
    let out = train(&mut model, &prepared, &cfg.train, &sched, state, Some(&ckpt.join(LOSS_LOG_FILE)))?;
    model.save(ckpt)?;
    out.state.save(ckpt, &out.optimizer, &model)?;
    let curve = LossCurve { step: out.state.step, epoch: out.state.epoch, epoch_losses: &out.state.loss_curve };
    std::fs::write(ckpt.join(LOSS_CURVE_FILE), serde_json::to_string_pretty(&curve).expect("serializable"))?;
    let mut resolved = cfg.clone();
    resolved.model = model.config.clone();
    resolved.write_beside(ckpt)?;
    if let (Some(first), Some(last)) = (out.state.loss_curve.first(), out.state.loss_curve.last()) {
        println!("step {}: epoch loss {first:.4} -> {last:.4}", out.state.step);
    }
    Ok(())
}

pub struct ComposeRequest {
    pub background: PathBuf,
    pub foreground: PathBuf,
    pub bbox: BoundingBox,
    pub indicators: Vec<Indicator>,
}

#[derive(Serialize, Deserialize)]
pub struct ComposedImage {
    pub indicator: String,
    pub task: String,
    pub file: String,
    pub seed: u64,
    pub z_t_sha256: String,
}

pub fn compose(cfg: &RunConfig, req: &ComposeRequest) -> Result<()> {
    let model = Model::load(&cfg.paths.checkpoint)?;
    let sched = cfg.schedule.build()?;
    cfg.sampler.validate(&sched)?;
    let n = model.config.encoder.image_size;
    let mut bg = load_png(&req.background, 3)?;
    if bg.shape()[1..] != [n, n] {
        bg = resize_bilinear(&bg, n, n)?;
    }
    let fg = load_png(&req.foreground, 3)?;
    let out = &cfg.paths.outputs;
    ensure_output_dir(out)?;
    let mut log = Vec::new();
    for &s in &req.indicators {
        let r = sample(&model, &bg, &fg, &req.bbox, s, &cfg.sampler, &sched, cfg.seed)?;
        let file = format!("composite_{}.png", s.task_name());
        save_png(&out.join(&file), &r.image)?;
        println!("indicator {s} ({}) z_T sha256 {} -> {file}", s.task_name(), r.z_t_hash);
        log.push(ComposedImage {
            indicator: s.to_string(),
            task: s.task_name().into(),
            file,
            seed: cfg.seed,
            z_t_sha256: r.z_t_hash,
        });
    }
    std::fs::write(out.join(COMPOSE_LOG_FILE), serde_json::to_string_pretty(&log).expect("serializable"))?;
    let mut resolved = cfg.clone();
    resolved.model = model.config.clone();
    resolved.write_beside(out)?;
    Ok(())
}

/// One evaluation pair; paths are relative to the item file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalItem {
    pub id: String,
    pub background: PathBuf,
    pub composite: PathBuf,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub foreground: Option<PathBuf>,
    /// Object mask of the composite, needed for foreground similarity.
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalItems {
    pub items: Vec<EvalItem>,
}

pub fn eval_metrics(cfg: &RunConfig, items_path: &Path, with_model: bool) -> Result<()> {
    let text = std::fs::read_to_string(items_path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", items_path.display())))?;
    let items: EvalItems =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid item file: {e}")))?;
    let root = items_path.parent().unwrap_or(Path::new("."));
    let model = if with_model { Some(Model::load(&cfg.paths.checkpoint)?) } else { None };
    let unit = |t: Tensor| t.map(|v| (v + 1.0) / 2.0);
    let (mut ssim, mut sim) = (Vec::new(), Vec::new());
    for it in &items.items {
        let [x0, y0, x1, y1] = it.bbox;
        let bbox = BoundingBox::new(x0, y0, x1, y1)?;
        let bg = load_png(&root.join(&it.background), 3)?;
        let comp = load_png(&root.join(&it.composite), 3)?;
        let score = masked_background_ssim(&unit(bg), &unit(comp.clone()), &bbox)?;
        ssim.push(ItemScore { id: it.id.clone(), score });
        if let Some(m) = &model {
            let (Some(fg), Some(mask)) = (&it.foreground, &it.mask) else {
                return Err(CliError::Usage(format!("item {} needs foreground and mask", it.id)));
            };
            let fg = load_png(&root.join(fg), 3)?;
            let mask = load_png(&root.join(mask), 1)?.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let score = masked_fg_similarity(&comp, &fg, &bbox, &mask, m)?;
            sim.push(ItemScore { id: it.id.clone(), score });
        }
    }
    let out = &cfg.paths.outputs;
    ensure_output_dir(out)?;
    let mut report = MetricReport::new("masked_background_ssim", ssim);
    report.metadata = BTreeMap::from([
        ("window".into(), format!("{SSIM_WINDOW}x{SSIM_WINDOW} gaussian, sigma {SSIM_SIGMA}")),
        ("constants".into(), format!("K1={SSIM_K1}, K2={SSIM_K2}, L=1")),
    ]);
    write_report(out, &report)?;
    if model.is_some() {
        let mut report = MetricReport::new("masked_fg_similarity", sim);
        report.metadata = BTreeMap::from([(
            "encoder".into(),
            "toy foreground encoder of the checkpoint; not comparable with CLIP-based scores".into(),
        )]);
        write_report(out, &report)?;
    }
    cfg.write_beside(out)?;
    Ok(())
}

fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    let path = dir.join(format!("{}.json", report.metric));
    std::fs::write(&path, serde_json::to_string_pretty(report).expect("serializable"))?;
    println!("{} over {} items: {:.6} -> {}", report.metric, report.items.len(), report.aggregate, path.display());
    Ok(())
}

pub fn eval_bt(csv: &Path, out: Option<&Path>, tol: f64, max_iter: usize) -> Result<()> {
    let file = std::fs::File::open(csv).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", csv.display())))?;
    let table = PairwiseTable::from_csv(file)?;
    let scores = bt_fit(&table, tol, max_iter)?;
    print!("{}", scores.format_rows());
    if !scores.converged {
        eprintln!("warning: not converged after {} iterations", scores.iterations);
    }
    if let Some(out) = out {
        let items = scores.methods.iter().zip(&scores.scores).map(|(m, &s)| ItemScore { id: m.clone(), score: s }).collect();
        let mut report = MetricReport::new("bradley_terry", items);
        let clamped: Vec<&str> =
            scores.methods.iter().zip(&scores.clamped).filter(|(_, &c)| c).map(|(m, _)| m.as_str()).collect();
        report.metadata = BTreeMap::from([
            ("normalization".into(), "natural-log strengths centered to mean zero".into()),
            ("iterations".into(), scores.iterations.to_string()),
            ("converged".into(), scores.converged.to_string()),
            ("clamped".into(), clamped.join(",")),
        ]);
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            ensure_output_dir(dir)?;
        }
        std::fs::write(out, serde_json::to_string_pretty(&report).expect("serializable"))?;
    }
    Ok(())
}

/// Per-rater rank vectors for the two subjective criteria.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rankings {
    pub methods: Vec<String>,
    pub quality: Vec<Vec<usize>>,
    pub fidelity: Vec<Vec<usize>>,
}

pub fn eval_rank(path: &Path) -> Result<()> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let r: Rankings = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid rankings: {e}")))?;
    let q = average_rank(&r.quality)?;
    let f = average_rank(&r.fidelity)?;
    if q.len() != r.methods.len() || f.len() != r.methods.len() {
        return Err(CliError::Usage(format!("rankings must cover all {} methods", r.methods.len())));
    }
    print!("{}", format_rank_rows(&r.methods, &q, &f));
    Ok(())
}
