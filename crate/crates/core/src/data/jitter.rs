//! Color jitter in the `[0, 1]` working space.

use serde::{Deserialize, Serialize};

use crate::numerics::{Rng, Tensor};

pub const FACTOR_RANGE: (f64, f64) = (0.8, 1.2);
pub const HUE_RANGE: (f64, f64) = (-0.05, 0.05);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub order: [JitterOp; 4],
}

impl JitterParams {
    pub fn identity() -> Self {
        Self {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
            order: [JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation, JitterOp::Hue],
        }
    }

    pub fn sample(rng: &mut Rng) -> Self {
        let (lo, hi) = FACTOR_RANGE;
        let brightness = rng.range(lo, hi);
        let contrast = rng.range(lo, hi);
        let saturation = rng.range(lo, hi);
        let hue = rng.range(HUE_RANGE.0, HUE_RANGE.1);
        let mut order = Self::identity().order;
        rng.shuffle(&mut order);
        Self { brightness, contrast, saturation, hue, order }
    }

    pub fn apply(&self, image: &Tensor) -> Tensor {
        self.apply_many(&[image]).pop().expect("one image in, one out")
    }

    /// Applies the same jitter to several same-size images. Contrast pivots
    /// on the gray mean of the first image at that point of the chain, so a
    /// pixel equal across inputs stays equal across outputs.
    pub fn apply_many(&self, images: &[&Tensor]) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = images.iter().map(|t| (*t).clone()).collect();
        for op in self.order {
            match op {
                JitterOp::Brightness => {
                    let b = self.brightness;
                    for img in &mut out {
                        *img = img.map(|v| (v * b).clamp(0.0, 1.0));
                    }
                }
                JitterOp::Contrast => {
                    let c = self.contrast;
                    let m = gray_mean(&out[0]);
                    for img in &mut out {
                        *img = img.map(|v| ((v - m) * c + m).clamp(0.0, 1.0));
                    }
                }
                JitterOp::Saturation => {
                    for img in &mut out {
                        per_pixel(img, |rgb| {
                            let g = luma(rgb);
                            rgb.map(|v| ((v - g) * self.saturation + g).clamp(0.0, 1.0))
                        });
                    }
                }
                JitterOp::Hue => {
                    if self.hue != 0.0 {
                        for img in &mut out {
                            per_pixel(img, |rgb| {
                                let (h, s, v) = rgb_to_hsv(rgb);
                                hsv_to_rgb((h + self.hue).rem_euclid(1.0), s, v).map(|x| x.clamp(0.0, 1.0))
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

fn luma([r, g, b]: [f64; 3]) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn gray_mean(img: &Tensor) -> f64 {
    let hw = img.len() / 3;
    let d = img.data();
    (0..hw).map(|i| luma([d[i], d[hw + i], d[2 * hw + i]])).sum::<f64>() / hw.max(1) as f64
}

fn per_pixel(img: &mut Tensor, f: impl Fn([f64; 3]) -> [f64; 3]) {
    let hw = img.len() / 3;
    let d = img.data_mut();
    for i in 0..hw {
        let o = f([d[i], d[hw + i], d[2 * hw + i]]);
        d[i] = o[0];
        d[hw + i] = o[1];
        d[2 * hw + i] = o[2];
    }
}

/// Hue in `[0, 1)`.
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
