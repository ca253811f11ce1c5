//! Self-supervised training data: synthetic sources, the augmentation
//! flow that turns one source into composites and foregrounds, and the
//! per-task tuple selection.
//!
//! Images live in a `[0, 1]` working space while being augmented; tuples
//! hold `[−1, 1]` tensors, which is also what the PNG loader returns.

mod augment;
mod io;
mod jitter;
mod synth;

pub use augment::{
    augment_composite, augment_foreground, augment_foreground_with, augment_pair, crop_record, crop_span, paste_object,
    warp_object, AugmentMeta, AugmentedPair, BlurParams, CropParams, ForegroundAug, ForegroundDraw, GeometryParams,
    BLUR_PROB, HFLIP_PROB, MAX_WARP_RETRIES, ROTATION_RANGE_DEG, CORNER_JITTER,
};
pub use io::{
    build_dataset, load_dataset, load_external_record, load_png, load_tuple, save_png, save_tuple, Manifest,
    ManifestEntry, MANIFEST_FILE,
};
pub use jitter::{hsv_to_rgb, rgb_to_hsv, JitterOp, JitterParams, FACTOR_RANGE, HUE_RANGE};
pub use synth::{generate_synthetic_source, ShapeKind};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::Indicator;
use crate::geometry::BoundingBox;
use crate::numerics::kernels::resize_bilinear;
use crate::numerics::{Rng, Tensor};

pub const MIN_BOX_AREA: f64 = 0.02;
pub const MAX_BOX_AREA: f64 = 0.80;

/// One source image with its single object.
#[derive(Clone, Debug)]
pub struct SourceRecord {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub bbox: BoundingBox,
    /// Binary `[1, H, W]`, zero outside the box.
    pub mask: Tensor,
    pub shape: Option<ShapeKind>,
}

impl SourceRecord {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.image.dims3()?;
        if c != 3 || self.mask.shape() != [1, h, w] {
            return Err(Error::shape(format!(
                "record image {:?} / mask {:?}",
                self.image.shape(),
                self.mask.shape()
            )));
        }
        self.bbox.validate()?;
        let span = self.bbox.pixel_span(h, w);
        for r in 0..h {
            for col in 0..w {
                let m = self.mask.at3(0, r, col);
                if m != 0.0 && m != 1.0 {
                    return Err(Error::Validation("object mask must be binary".into()));
                }
                if m == 1.0 && !span.contains(r, col) {
                    return Err(Error::geometry(format!("mask pixel ({r},{col}) outside the box")));
                }
            }
        }
        Ok(())
    }
}

/// True iff the box covers between `min_area` and `max_area` of the image,
/// both ends inclusive.
pub fn filter_box(record: &SourceRecord, min_area: f64, max_area: f64) -> bool {
    let a = record.bbox.area();
    a >= min_area && a <= max_area
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub image_size: usize,
    pub fg_size: usize,
    /// Box fill of `I_b` in the `[−1, 1]` space.
    pub fill: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { image_size: 64, fg_size: 64, fill: 0.0 }
    }
}

impl DataConfig {
    pub fn tiny() -> Self {
        Self { image_size: 32, fg_size: 32, fill: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.fg_size < 4 {
            return Err(Error::config("image_size must be ≥ 8 and fg_size ≥ 4"));
        }
        if !(-1.0..=1.0).contains(&self.fill) {
            return Err(Error::config("fill must lie in [-1, 1]"));
        }
        Ok(())
    }
}

/// Where a tuple came from and how it was made.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TupleMeta {
    pub source: u64,
    pub seed: u64,
    pub bbox: BoundingBox,
    pub indicator: Indicator,
    /// How the foreground is fitted into the box when pasted.
    pub paste_mode: String,
    /// `None` for tuples built without augmentation.
    pub augmentation: Option<AugmentMeta>,
}

/// `(I_b, I_f, B, M, S, I_c)` with images in `[−1, 1]`.
#[derive(Clone, Debug)]
pub struct TrainingTuple {
    pub id: String,
    /// `I_c` with the box region filled.
    pub background: Tensor,
    pub foreground: Tensor,
    /// Pseudo ground truth.
    pub composite: Tensor,
    /// `[1, H, W]` box mask.
    pub mask: Tensor,
    pub bbox: BoundingBox,
    pub indicator: Indicator,
    pub meta: TupleMeta,
}

pub(crate) fn to_signed(t: &Tensor) -> Tensor {
    t.map(|v| v * 2.0 - 1.0)
}


/// `I_c` with the box pixels of every channel set to `fill`.
pub fn fill_box(image: &Tensor, bbox: &BoundingBox, fill: f64) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let span = bbox.pixel_span(h, w);
    let mut out = image.clone();
    for ch in 0..c {
        for r in span.r0..span.r1 {
            for col in span.c0..span.c1 {
                out.set3(ch, r, col, fill);
            }
        }
    }
    Ok(out)
}

/// `(I_f, I_c)` for an indicator:
///
/// | S     | I_f    | I_c    |
/// |-------|--------|--------|
/// | (0,0) | I_f^u  | I_c^n  |
/// | (1,0) | I_f^u  | I_c^u  |
/// | (0,1) | I_f^g  | I_c^n  |
/// | (1,1) | I_f^g  | I_c^u  |
pub fn select_pair(pair: &AugmentedPair, s: Indicator) -> (&Tensor, &Tensor) {
    let fg = if s.pose { &pair.foreground_g } else { &pair.foreground_u };
    let comp = if s.illumination { &pair.composite_u } else { &pair.composite_n };
    (fg, comp)
}

pub fn make_tuple(pair: &AugmentedPair, s: Indicator, fill: f64, id: String, source: u64, seed: u64) -> Result<TrainingTuple> {
    let (fg, comp) = select_pair(pair, s);
    let composite = to_signed(comp);
    let (_, h, w) = composite.dims3()?;
    Ok(TrainingTuple {
        id,
        background: fill_box(&composite, &pair.bbox, fill)?,
        foreground: to_signed(fg),
        mask: pair.bbox.mask(h, w),
        composite,
        bbox: pair.bbox,
        indicator: s,
        meta: TupleMeta {
            source,
            seed,
            bbox: pair.bbox,
            indicator: s,
            paste_mode: "stretch_to_box".into(),
            augmentation: Some(pair.meta.clone()),
        },
    })
}

/// The copy-paste tuple used by ablations without augmentation: `I_c` is the
/// source itself and `I_f` its own box crop.
pub fn plain_tuple(record: &SourceRecord, cfg: &DataConfig, id: String, source: u64, seed: u64) -> Result<TrainingTuple> {
    let (_, h, w) = record.image.dims3()?;
    let span = record.bbox.pixel_span(h, w);
    let crop = crop_span(&record.image, span)?;
    let composite = to_signed(&record.image);
    let indicator = Indicator::BLEND;
    Ok(TrainingTuple {
        id,
        background: fill_box(&composite, &record.bbox, cfg.fill)?,
        foreground: to_signed(&resize_bilinear(&crop, cfg.fg_size, cfg.fg_size)?),
        mask: record.bbox.mask(h, w),
        composite,
        bbox: record.bbox,
        indicator,
        meta: TupleMeta {
            source,
            seed,
            bbox: record.bbox,
            indicator,
            paste_mode: "stretch_to_box".into(),
            augmentation: None,
        },
    })
}

/// Source `i` of a dataset and the distinct source it swaps backgrounds with.
pub fn source_pair(cfg: &DataConfig, seed: u64, i: u64) -> (SourceRecord, SourceRecord) {
    let n = cfg.image_size;
    let src = generate_synthetic_source(&mut Rng::substream(seed, "source", i), n, n);
    let other = generate_synthetic_source(&mut Rng::substream(seed, "other-source", i), n, n);
    (src, other)
}

/// Everything derived from one source: its four task tuples and the plain
/// tuple.
pub struct SourceTuples {
    pub tuples: Vec<TrainingTuple>,
    pub plain: TrainingTuple,
}

pub fn tuples_for_source(cfg: &DataConfig, seed: u64, i: u64) -> Result<SourceTuples> {
    let (src, other) = source_pair(cfg, seed, i);
    let pair = augment_pair(&src, &other, cfg.fg_size, &mut Rng::substream(seed, "augment", i))?;
    let tuples = Indicator::ALL
        .iter()
        .map(|&s| make_tuple(&pair, s, cfg.fill, tuple_id(i, Some(s)), i, seed))
        .collect::<Result<Vec<_>>>()?;
    let plain = plain_tuple(&src, cfg, tuple_id(i, None), i, seed)?;
    Ok(SourceTuples { tuples, plain })
}

pub(crate) fn tuple_id(source: u64, s: Option<Indicator>) -> String {
    match s {
        Some(s) => format!("s{source:05}_{}{}", s.illumination as u8, s.pose as u8),
        None => format!("s{source:05}_plain"),
    }
}

/// In-memory dataset of `n_sources` sources, generated in parallel.
pub fn generate_tuples(cfg: &DataConfig, n_sources: usize, seed: u64) -> Result<Vec<SourceTuples>> {
    cfg.validate()?;
    (0..n_sources as u64).into_par_iter().map(|i| tuples_for_source(cfg, seed, i)).collect()
}
