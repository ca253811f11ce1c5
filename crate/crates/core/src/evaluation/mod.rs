//! Masked image metrics, Bradley-Terry scoring and metric reports.
//!
//! The foreground similarity uses this crate's own toy foreground encoder
//! as the embedding network, so its values are only comparable between runs
//! of the same model, never with CLIP-based numbers.

mod bt;

pub use bt::{average_rank, bt_fit, format_rank_rows, BtScores, PairwiseTable, SCORE_FLOOR};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::model::Model;
use crate::numerics::kernels::{resize_bilinear, resize_nearest};
use crate::numerics::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Maps an image to a global embedding vector.
pub trait GlobalEmbedder {
    /// Expected input side length; inputs are resized to it.
    fn input_size(&self) -> usize;
    fn embed_global(&self, image: &Tensor) -> Result<Vec<f64>>;
}

impl GlobalEmbedder for Model {
    fn input_size(&self) -> usize {
        self.config.encoder.fg_size
    }

    fn embed_global(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(self.embed_foreground(image)?.global.into_data())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("embedding lengths differ"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn zero_where(image: &mut Tensor, mask: &Tensor) {
    let (c, h, w) = image.dims3().expect("rank-3 image");
    let hw = h * w;
    for ch in 0..c {
        for i in 0..hw {
            if mask.data()[i] <= 0.0 {
                image.data_mut()[ch * hw + i] = 0.0;
            }
        }
    }
}

/// Cosine similarity of global embeddings between the object cut out of
/// `composite` and `input_fg`. Non-object pixels are zeroed in both before
/// any resampling, so edits outside the object never reach the score.
pub fn masked_fg_similarity(
    composite: &Tensor,
    input_fg: &Tensor,
    bbox: &BoundingBox,
    object_mask: &Tensor,
    encoder: &dyn GlobalEmbedder,
) -> Result<f64> {
    let (c, h, w) = composite.dims3()?;
    if object_mask.shape() != [1, h, w] {
        return Err(Error::shape("object mask must match the composite"));
    }
    let (fc, fh, fw) = input_fg.dims3()?;
    if fc != c {
        return Err(Error::shape("foreground and composite channel counts differ"));
    }
    let span = bbox.clamped()?.pixel_span(h, w);
    let mut crop = crate::data::crop_span(composite, span)?;
    let mask = crate::data::crop_span(object_mask, span)?;
    if mask.data().iter().all(|&m| m <= 0.0) {
        return Err(Error::geometry("object mask is empty inside the box"));
    }
    zero_where(&mut crop, &mask);
    let crop = resize_bilinear(&crop, fh, fw)?;
    let mask = resize_nearest(&mask, fh, fw)?;
    let mut crop = crop;
    zero_where(&mut crop, &mask);
    let mut fg = input_fg.clone();
    zero_where(&mut fg, &mask);
    let n = encoder.input_size();
    let a = encoder.embed_global(&resize_bilinear(&crop, n, n)?)?;
    let b = encoder.embed_global(&resize_bilinear(&fg, n, n)?)?;
    cosine(&a, &b)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all fully-contained 11×11 windows, averaged over
/// channels. Inputs in `[0, 1]` (dynamic range 1).
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (c, h, w) = a.dims3()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels")));
    }
    let g = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..c {
        for r in 0..oh {
            for col in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (i, gi) in g.iter().enumerate() {
                    for (j, gj) in g.iter().enumerate() {
                        let wt = gi * gj;
                        let x = a.at3(ch, r + i, col + j);
                        let y = b.at3(ch, r + i, col + j);
                        mx += wt * x;
                        my += wt * y;
                        xx += wt * x * x;
                        yy += wt * y * y;
                        xy += wt * x * y;
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    Ok(total / (c * oh * ow) as f64)
}

/// SSIM between background and composite with the box interior set to 0
/// in both.
pub fn masked_background_ssim(background: &Tensor, composite: &Tensor, bbox: &BoundingBox) -> Result<f64> {
    background.expect_same_shape(composite)?;
    let b = crate::data::fill_box(background, bbox, 0.0)?;
    let c = crate::data::fill_box(composite, bbox, 0.0)?;
    ssim(&b, &c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub id: String,
    pub score: f64,
}

/// `{metric, items, aggregate, metadata}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub items: Vec<ItemScore>,
    pub aggregate: f64,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl MetricReport {
    /// Aggregate is the arithmetic mean of the item scores.
    pub fn new(metric: &str, items: Vec<ItemScore>) -> Self {
        let aggregate = if items.is_empty() {
            0.0
        } else {
            items.iter().map(|i| i.score).sum::<f64>() / items.len() as f64
        };
        Self { metric: metric.to_string(), items, aggregate, metadata: BTreeMap::new() }
    }
}

/// JSON schema every report file validates against.
pub const REPORT_SCHEMA: &str = r#"{
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "MetricReport",
  "type": "object",
  "required": ["metric", "items", "aggregate"],
  "properties": {
    "metric": {"type": "string", "minLength": 1},
    "items": {
      "type": "array",
      "items": {
        "type": "object",
        "required": ["id", "score"],
        "properties": {"id": {"type": "string"}, "score": {"type": "number"}},
        "additionalProperties": false
      }
    },
    "aggregate": {"type": "number"},
    "metadata": {"type": "object", "additionalProperties": {"type": "string"}}
  },
  "additionalProperties": false
}"#;
