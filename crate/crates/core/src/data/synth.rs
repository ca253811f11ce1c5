//! Procedural source images: a gradient background with one anti-aliased
//! shape whose mask and box are known exactly.

use serde::{Deserialize, Serialize};

use crate::data::{filter_box, SourceRecord, MAX_BOX_AREA, MIN_BOX_AREA};
use crate::geometry::BoundingBox;
use crate::numerics::{Rng, Tensor};

const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rectangle { x0: f64, y0: f64, x1: f64, y1: f64 },
    Triangle([(f64, f64); 3]),
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0,
            Shape::Rectangle { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Triangle(v) => {
                let side = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let (d0, d1, d2) = (side(v[0], v[1]), side(v[1], v[2]), side(v[2], v[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

fn random_color(rng: &mut Rng) -> [f64; 3] {
    [rng.range(0.05, 0.95), rng.range(0.05, 0.95), rng.range(0.05, 0.95)]
}

/// Renders one record; retries internally until the tight object box
/// passes the area filter.
pub fn generate_synthetic_source(rng: &mut Rng, h: usize, w: usize) -> SourceRecord {
    loop {
        if let Some(rec) = try_generate(rng, h, w) {
            return rec;
        }
    }
}

fn try_generate(rng: &mut Rng, h: usize, w: usize) -> Option<SourceRecord> {
    let c0 = random_color(rng);
    let c1 = random_color(rng);
    let angle = rng.range(0.0, std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());

    // Target box in normalized coordinates, area drawn inside the filter.
    let area = rng.range(MIN_BOX_AREA * 2.0, MAX_BOX_AREA * 0.75);
    let aspect = rng.range(0.6, 1.6);
    let bw = (area * aspect).sqrt().min(0.95);
    let bh = (area / bw).min(0.95);
    let bx = rng.range(0.0, 1.0 - bw);
    let by = rng.range(0.0, 1.0 - bh);
    let kind = match rng.below(3) {
        0 => ShapeKind::Ellipse,
        1 => ShapeKind::Rectangle,
        _ => ShapeKind::Triangle,
    };
    let shape = match kind {
        ShapeKind::Ellipse => Shape::Ellipse { cx: bx + bw / 2.0, cy: by + bh / 2.0, rx: bw / 2.0, ry: bh / 2.0 },
        ShapeKind::Rectangle => Shape::Rectangle { x0: bx, y0: by, x1: bx + bw, y1: by + bh },
        ShapeKind::Triangle => Shape::Triangle([
            (bx + rng.range(0.0, bw), by),
            (bx + bw, by + rng.range(0.3, 1.0) * bh),
            (bx, by + bh),
        ]),
    };
    let mut color = random_color(rng);
    // Keep the object distinguishable from the background.
    let mid: Vec<f64> = (0..3).map(|k| 0.5 * (c0[k] + c1[k])).collect();
    if (0..3).map(|k| (color[k] - mid[k]).abs()).sum::<f64>() < 0.3 {
        color = color.map(|v| 1.0 - v);
    }

    let mut image = Tensor::zeros(&[3, h, w]);
    let mut mask = Tensor::zeros(&[1, h, w]);
    let (mut r0, mut r1, mut q0, mut q1) = (h, 0, w, 0);
    for r in 0..h {
        for c in 0..w {
            let (u, v) = ((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64);
            let t = (((u - 0.5) * dx + (v - 0.5) * dy) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = (c as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / w as f64;
                    let y = (r as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / h as f64;
                    hits += shape.contains(x, y) as usize;
                }
            }
            let cov = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for k in 0..3 {
                let bg = c0[k] * (1.0 - t) + c1[k] * t;
                let val = if hits > 0 { color[k] * cov + bg * (1.0 - cov) } else { bg };
                image.set3(k, r, c, val);
            }
            if hits > 0 {
                mask.set3(0, r, c, 1.0);
                r0 = r0.min(r);
                r1 = r1.max(r + 1);
                q0 = q0.min(c);
                q1 = q1.max(c + 1);
            }
        }
    }
    if r1 == 0 {
        return None;
    }
    let bbox = BoundingBox {
        x0: q0 as f64 / w as f64,
        y0: r0 as f64 / h as f64,
        x1: q1 as f64 / w as f64,
        y1: r1 as f64 / h as f64,
    };
    let rec = SourceRecord { image, bbox, mask, shape: Some(kind) };
    filter_box(&rec, MIN_BOX_AREA, MAX_BOX_AREA).then_some(rec)
}
