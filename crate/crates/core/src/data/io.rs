//! PNG tuples on disk and the dataset manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{generate_tuples, DataConfig, SourceRecord, TrainingTuple, TupleMeta};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::numerics::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
const META_FILE: &str = "meta.json";
const FILES: [&str; 4] = ["background.png", "foreground.png", "composite.png", "mask.png"];

fn quantize(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8
}

fn dequantize(v: u8) -> f64 {
    v as f64 / 255.0 * 2.0 - 1.0
}

/// Writes a `[3,H,W]` or `[1,H,W]` tensor in `[−1, 1]` as 8-bit PNG.
pub fn save_png(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = t.dims3()?;
    match c {
        3 => {
            let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                image::Rgb([0, 1, 2].map(|ch| quantize(t.at3(ch, y as usize, x as usize))))
            });
            img.save(path)?;
        }
        1 => {
            let img = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([quantize(t.at3(0, y as usize, x as usize))]));
            img.save(path)?;
        }
        _ => return Err(Error::shape(format!("cannot store {c} channels as PNG"))),
    }
    Ok(())
}

/// Reads a PNG as `[channels, H, W]` in `[−1, 1]`; `channels` is 3 or 1.
pub fn load_png(path: &Path, channels: usize) -> Result<Tensor> {
    let img = image::open(path)?;
    match channels {
        3 => {
            let rgb = img.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            Ok(Tensor::from_fn(&[3, h, w], |i| {
                let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
                dequantize(rgb.get_pixel(x as u32, y as u32)[ch])
            }))
        }
        1 => {
            let g = img.to_luma8();
            let (w, h) = (g.width() as usize, g.height() as usize);
            Ok(Tensor::from_fn(&[1, h, w], |i| dequantize(g.get_pixel((i % w) as u32, (i / w) as u32)[0])))
        }
        _ => Err(Error::shape(format!("cannot load {channels} channels"))),
    }
}

#[derive(Serialize, Deserialize)]
struct StoredMeta {
    id: String,
    #[serde(flatten)]
    meta: TupleMeta,
}

pub fn save_tuple(dir: &Path, t: &TrainingTuple) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    // The binary mask is stored as black/white.
    let mask = t.mask.map(|v| v * 2.0 - 1.0);
    for (name, img) in FILES.iter().zip([&t.background, &t.foreground, &t.composite, &mask]) {
        save_png(&dir.join(name), img)?;
    }
    let stored = StoredMeta { id: t.id.clone(), meta: t.meta.clone() };
    std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&stored)?)?;
    Ok(())
}

pub fn load_tuple(dir: &Path) -> Result<TrainingTuple> {
    let text = std::fs::read_to_string(dir.join(META_FILE))?;
    let stored: StoredMeta = serde_json::from_str(&text)?;
    let mask = load_png(&dir.join(FILES[3]), 1)?.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    Ok(TrainingTuple {
        id: stored.id,
        background: load_png(&dir.join(FILES[0]), 3)?,
        foreground: load_png(&dir.join(FILES[1]), 3)?,
        composite: load_png(&dir.join(FILES[2]), 3)?,
        mask,
        bbox: stored.meta.bbox,
        indicator: stored.meta.indicator,
        meta: stored.meta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the dataset root.
    pub dir: String,
    pub source: u64,
    pub indicator: String,
    pub task: String,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub n_sources: usize,
    pub config: DataConfig,
    pub tuples: Vec<ManifestEntry>,
    /// Copy-paste tuples for runs without augmentation.
    pub plain: Vec<ManifestEntry>,
    pub task_counts: BTreeMap<String, usize>,
}

fn entry(t: &TrainingTuple, dir: String) -> ManifestEntry {
    ManifestEntry {
        id: t.id.clone(),
        dir,
        source: t.meta.source,
        indicator: t.indicator.to_string(),
        task: t.indicator.task_name().to_string(),
        files: FILES.iter().chain([&META_FILE]).map(|s| s.to_string()).collect(),
    }
}

/// Generates `n_sources` sources and writes their four task tuples plus one
/// plain tuple each under `out_dir`, followed by the manifest.
pub fn build_dataset(cfg: &DataConfig, n_sources: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    let sources = generate_tuples(cfg, n_sources, seed)?;
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = Manifest {
        version: 1,
        seed,
        n_sources,
        config: cfg.clone(),
        tuples: Vec::new(),
        plain: Vec::new(),
        task_counts: BTreeMap::new(),
    };
    for st in &sources {
        for t in &st.tuples {
            let rel = format!("tuples/{}", t.id);
            save_tuple(&out_dir.join(&rel), t)?;
            *manifest.task_counts.entry(t.indicator.task_name().to_string()).or_default() += 1;
            manifest.tuples.push(entry(t, rel));
        }
        let rel = format!("plain/{}", st.plain.id);
        save_tuple(&out_dir.join(&rel), &st.plain)?;
        manifest.plain.push(entry(&st.plain, rel));
    }
    std::fs::write(out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads the task tuples (or the plain ones) listed in a manifest.
pub fn load_dataset(root: &Path, plain: bool) -> Result<(Manifest, Vec<TrainingTuple>)> {
    let path = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::State(format!("no manifest at {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let entries = if plain { &manifest.plain } else { &manifest.tuples };
    let tuples = entries
        .iter()
        .map(|e| load_tuple(&root.join(PathBuf::from(&e.dir))))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, tuples))
}

/// An external `(image, mask)` pair as a source record in the `[0, 1]`
/// working space. Without `bbox`, the tight box around the mask is used.
pub fn load_external_record(image: &Path, mask: &Path, bbox: Option<BoundingBox>) -> Result<SourceRecord> {
    let img = load_png(image, 3)?.map(|v| (v + 1.0) / 2.0);
    let m = load_png(mask, 1)?.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let (_, h, w) = img.dims3()?;
    if m.shape() != [1, h, w] {
        return Err(Error::shape("mask and image sizes differ"));
    }
    let bbox = match bbox {
        Some(b) => b,
        None => {
            let (mut r0, mut r1, mut c0, mut c1) = (h, 0, w, 0);
            for r in 0..h {
                for c in 0..w {
                    if m.at3(0, r, c) > 0.0 {
                        r0 = r0.min(r);
                        r1 = r1.max(r + 1);
                        c0 = c0.min(c);
                        c1 = c1.max(c + 1);
                    }
                }
            }
            if r1 == 0 {
                return Err(Error::geometry("external mask is empty"));
            }
            BoundingBox::new(c0 as f64 / w as f64, r0 as f64 / h as f64, c1 as f64 / w as f64, r1 as f64 / h as f64)?
        }
    };
    let rec = SourceRecord { image: img, bbox, mask: m, shape: None };
    rec.validate()?;
    Ok(rec)
}
