//! Bounding boxes in normalized image coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Axis-aligned box with corners in `[0, 1]` relative to the image extents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Half-open pixel rows `r0..r1` and columns `c0..c1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelSpan {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl PixelSpan {
    pub fn height(&self) -> usize {
        self.r1 - self.r0
    }

    pub fn width(&self) -> usize {
        self.c1 - self.c0
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.r0..self.r1).contains(&r) && (self.c0..self.c1).contains(&c)
    }
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn full() -> Self {
        Self { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.x0, self.y0, self.x1, self.y1];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::geometry(format!("box {self:?} outside [0,1]")));
        }
        if !(self.x0 < self.x1 && self.y0 < self.y1) {
            return Err(Error::geometry(format!("box {self:?} has no area")));
        }
        Ok(())
    }

    /// Intersection with the unit square; errors when nothing is left.
    pub fn clamped(&self) -> Result<Self> {
        let c = Self {
            x0: self.x0.clamp(0.0, 1.0),
            y0: self.y0.clamp(0.0, 1.0),
            x1: self.x1.clamp(0.0, 1.0),
            y1: self.y1.clamp(0.0, 1.0),
        };
        if !(c.x0 < c.x1 && c.y0 < c.y1) {
            return Err(Error::geometry(format!("box {self:?} is degenerate after clamping")));
        }
        Ok(c)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Fraction of the image covered.
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Pixels of an `h × w` grid touched by the box. Never empty for a box
    /// with positive area.
    pub fn pixel_span(&self, h: usize, w: usize) -> PixelSpan {
        let lo = |v: f64, n: usize| ((v * n as f64).floor().max(0.0) as usize).min(n - 1);
        let hi = |v: f64, n: usize, start: usize| {
            ((v * n as f64).ceil() as usize).clamp(start + 1, n)
        };
        let r0 = lo(self.y0, h);
        let c0 = lo(self.x0, w);
        PixelSpan { r0, r1: hi(self.y1, h, r0), c0, c1: hi(self.x1, w, c0) }
    }

    /// Binary `[1, h, w]` mask of [`Self::pixel_span`].
    pub fn mask(&self, h: usize, w: usize) -> Tensor {
        let span = self.pixel_span(h, w);
        Tensor::from_fn(&[1, h, w], |i| {
            let (r, c) = (i / w, i % w);
            if span.contains(r, c) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Re-expresses this box relative to a sub-window given in the same
    /// normalized frame.
    pub fn relative_to(&self, window: &BoundingBox) -> Self {
        Self {
            x0: (self.x0 - window.x0) / window.width(),
            y0: (self.y0 - window.y0) / window.height(),
            x1: (self.x1 - window.x0) / window.width(),
            y1: (self.y1 - window.y0) / window.height(),
        }
    }

    /// Inverse of [`Self::relative_to`].
    pub fn absolute_from(&self, window: &BoundingBox) -> Self {
        Self {
            x0: window.x0 + self.x0 * window.width(),
            y0: window.y0 + self.y0 * window.height(),
            x1: window.x0 + self.x1 * window.width(),
            y1: window.y0 + self.y1 * window.height(),
        }
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inverted_and_out_of_range() {
        assert!(BoundingBox::new(0.5, 0.1, 0.4, 0.9).is_err());
        assert!(BoundingBox::new(0.1, 0.1, 1.2, 0.9).is_err());
        assert!(BoundingBox::new(0.1, 0.1, 0.1, 0.9).is_err());
    }

    #[test]
    fn span_covers_partial_pixels() {
        let b = BoundingBox::new(0.3, 0.0, 0.55, 1.0).unwrap();
        let s = b.pixel_span(8, 8);
        assert_eq!((s.c0, s.c1, s.r0, s.r1), (2, 5, 0, 8));
    }

    #[test]
    fn tiny_box_still_one_pixel() {
        let b = BoundingBox::new(0.51, 0.51, 0.52, 0.52).unwrap();
        let s = b.pixel_span(4, 4);
        assert_eq!((s.height(), s.width()), (1, 1));
    }

    #[test]
    fn full_box_mask_all_ones() {
        assert!(BoundingBox::full().mask(5, 7).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn relative_round_trip() {
        let win = BoundingBox::new(0.1, 0.2, 0.9, 0.7).unwrap();
        let b = BoundingBox::new(0.3, 0.3, 0.6, 0.5).unwrap();
        let back = b.relative_to(&win).absolute_from(&win);
        assert!((back.x0 - b.x0).abs() < 1e-15 && (back.y1 - b.y1).abs() < 1e-15);
    }
}
