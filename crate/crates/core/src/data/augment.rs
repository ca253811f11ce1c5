//! The augmentation flow from one source to `{I_c^u, I_c^n}` and
//! `{I_f^u, I_f^g}`.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::data::{JitterParams, SourceRecord};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, PixelSpan};
use crate::numerics::kernels::{bilinear_sample, resize_bilinear, resize_nearest};
use crate::numerics::{Rng, Tensor};

pub const HFLIP_PROB: f64 = 0.2;
pub const ROTATION_RANGE_DEG: f64 = 20.0;
/// Corner displacement bound as a fraction of the frame side.
pub const CORNER_JITTER: f64 = 0.1;
pub const BLUR_PROB: f64 = 0.3;
pub const BLUR_SIGMA_RANGE: (f64, f64) = (0.5, 1.5);
pub const BLUR_TAPS: usize = 5;
pub const MAX_WARP_RETRIES: usize = 10;

/// Crop window in normalized source coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    pub window: BoundingBox,
}

impl CropParams {
    /// Square-aspect window that contains `bbox`; the identity window when
    /// the box leaves no freedom.
    pub fn sample(bbox: &BoundingBox, rng: &mut Rng) -> Self {
        let min_side = bbox.width().max(bbox.height());
        if min_side >= 1.0 {
            return Self { window: BoundingBox::full() };
        }
        let side = rng.range(min_side, 1.0);
        let x0 = rng.range((bbox.x1 - side).max(0.0), bbox.x0.min(1.0 - side));
        let y0 = rng.range((bbox.y1 - side).max(0.0), bbox.y0.min(1.0 - side));
        // Guard against rounding pushing the box edge out of the window.
        let window = BoundingBox {
            x0: x0.min(bbox.x0),
            y0: y0.min(bbox.y0),
            x1: (x0 + side).max(bbox.x1).min(1.0),
            y1: (y0 + side).max(bbox.y1).min(1.0),
        };
        Self { window }
    }

    pub fn is_identity(&self) -> bool {
        self.window == BoundingBox::full()
    }
}

/// Resamples the window of `image` onto an `oh × ow` grid.
fn crop_resample(image: &Tensor, window: &BoundingBox, oh: usize, ow: usize, nearest: bool) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if *window == BoundingBox::full() {
        return if nearest { resize_nearest(image, oh, ow) } else { resize_bilinear(image, oh, ow) };
    }
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for r in 0..oh {
        let y = (window.y0 + (r as f64 + 0.5) / oh as f64 * window.height()) * h as f64;
        for col in 0..ow {
            let x = (window.x0 + (col as f64 + 0.5) / ow as f64 * window.width()) * w as f64;
            if nearest {
                let (sr, sc) = ((y.floor() as usize).min(h - 1), (x.floor() as usize).min(w - 1));
                for ch in 0..c {
                    out.set3(ch, r, col, image.at3(ch, sr, sc));
                }
            } else {
                let v = bilinear_sample(image, x, y)?;
                for ch in 0..c {
                    out.set3(ch, r, col, v.data()[ch]);
                }
            }
        }
    }
    Ok(out)
}

/// The record seen through a crop window, resampled to the source size.
pub fn crop_record(record: &SourceRecord, crop: &CropParams) -> Result<SourceRecord> {
    if crop.is_identity() {
        return Ok(record.clone());
    }
    let (_, h, w) = record.image.dims3()?;
    Ok(SourceRecord {
        image: crop_resample(&record.image, &crop.window, h, w, false)?,
        mask: crop_resample(&record.mask, &crop.window, h, w, true)?,
        bbox: record.bbox.relative_to(&crop.window).clamped()?,
        shape: record.shape,
    })
}

/// Random crop containing the box, then color jitter. Returns `I_c^u`, the
/// box in crop coordinates and the draws.
pub fn augment_composite(record: &SourceRecord, rng: &mut Rng) -> Result<(Tensor, BoundingBox, CropParams, JitterParams)> {
    let crop = CropParams::sample(&record.bbox, rng);
    let jitter = JitterParams::sample(rng);
    let cropped = crop_record(record, &crop)?;
    Ok((jitter.apply(&cropped.image), cropped.bbox, crop, jitter))
}

/// Rows and columns of a span, all channels.
pub fn crop_span(image: &Tensor, span: PixelSpan) -> Result<Tensor> {
    let (c, _, _) = image.dims3()?;
    let (sh, sw) = (span.height(), span.width());
    let mut out = Tensor::zeros(&[c, sh, sw]);
    for ch in 0..c {
        for r in 0..sh {
            for col in 0..sw {
                out.set3(ch, r, col, image.at3(ch, span.r0 + r, span.c0 + col));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryParams {
    pub hflip: bool,
    pub rotation_deg: f64,
    /// Displacement of the frame corners (TL, TR, BR, BL) as fractions of
    /// the frame side.
    pub corner_offsets: [[f64; 2]; 4],
}

impl GeometryParams {
    pub fn identity() -> Self {
        Self { hflip: false, rotation_deg: 0.0, corner_offsets: [[0.0; 2]; 4] }
    }

    pub fn sample(rng: &mut Rng) -> Self {
        let hflip = rng.bernoulli(HFLIP_PROB);
        let rotation_deg = rng.range(-ROTATION_RANGE_DEG, ROTATION_RANGE_DEG);
        let mut corner_offsets = [[0.0; 2]; 4];
        for c in &mut corner_offsets {
            for v in c.iter_mut() {
                *v = rng.range(-CORNER_JITTER, CORNER_JITTER);
            }
        }
        Self { hflip, rotation_deg, corner_offsets }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Where the corners of a `side × side` frame land, in pixel units.
    pub fn destination_corners(&self, side: f64) -> [[f64; 2]; 4] {
        let src = [[0.0, 0.0], [side, 0.0], [side, side], [0.0, side]];
        let (cx, cy) = (side / 2.0, side / 2.0);
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let mut dst = [[0.0; 2]; 4];
        for (i, p) in src.iter().enumerate() {
            let x = if self.hflip { side - p[0] } else { p[0] };
            let (dx, dy) = (x - cx, p[1] - cy);
            dst[i] = [
                cx + cos * dx - sin * dy + self.corner_offsets[i][0] * side,
                cy + sin * dx + cos * dy + self.corner_offsets[i][1] * side,
            ];
        }
        dst
    }
}

/// Homography taking `src[i]` to `dst[i]` (direct linear transform with
/// `h33 = 1`).
fn homography(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> Result<Matrix3<f64>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let ([x, y], [u, v]) = (src[i], dst[i]);
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::geometry("degenerate corner configuration"))?;
    Ok(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

/// Bilinear taps at pixel coordinate `(x, y)` (centers at `i + 0.5`);
/// taps outside the frame are dropped, i.e. read as zero.
fn zero_padded_taps(h: usize, w: usize, x: f64, y: f64) -> Vec<(usize, f64)> {
    let (gx, gy) = (x - 0.5, y - 0.5);
    let (fx0, fy0) = (gx.floor(), gy.floor());
    let (ax, ay) = (gx - fx0, gy - fy0);
    let mut taps = Vec::with_capacity(4);
    for (dy, wy) in [(0.0, 1.0 - ay), (1.0, ay)] {
        for (dx, wx) in [(0.0, 1.0 - ax), (1.0, ax)] {
            let (r, c) = (fy0 + dy, fx0 + dx);
            let wt = wy * wx;
            if wt > 0.0 && r >= 0.0 && c >= 0.0 && (r as usize) < h && (c as usize) < w {
                taps.push((r as usize * w + c as usize, wt));
            }
        }
    }
    taps
}

/// Warps the object layer (`image` where `mask` is set) and recomposites it
/// over `fill`. Returns the image and the binary warped mask, or `None`
/// when no object pixel survives in the frame. Pixels outside both masks
/// are copied from `fill` unchanged.
pub fn warp_object(image: &Tensor, mask: &Tensor, fill: &Tensor, params: &GeometryParams) -> Result<Option<(Tensor, Tensor)>> {
    let (c, h, w) = image.dims3()?;
    if mask.shape() != [1, h, w] || fill.shape() != image.shape() {
        return Err(Error::shape("warp inputs disagree in size"));
    }
    if params.is_identity() {
        return Ok(Some((image.clone(), mask.clone())));
    }
    let side = h.max(w) as f64;
    let src = [[0.0, 0.0], [side, 0.0], [side, side], [0.0, side]];
    let hmat = homography(&src, &params.destination_corners(side))?;
    let inv = hmat.try_inverse().ok_or_else(|| Error::geometry("singular homography"))?;
    let mut out = fill.clone();
    let mut out_mask = Tensor::zeros(&[1, h, w]);
    let mut any = false;
    let hw = h * w;
    for r in 0..h {
        for col in 0..w {
            let p = inv * Vector3::new(col as f64 + 0.5, r as f64 + 0.5, 1.0);
            if p.z.abs() < 1e-12 {
                continue;
            }
            let taps = zero_padded_taps(h, w, p.x / p.z, p.y / p.z);
            let mw: f64 = taps.iter().map(|&(i, wt)| wt * mask.data()[i]).sum();
            if mw <= 0.0 {
                continue;
            }
            any = true;
            out_mask.set3(0, r, col, 1.0);
            for ch in 0..c {
                let plane = &image.data()[ch * hw..(ch + 1) * hw];
                let premult: f64 = taps.iter().map(|&(i, wt)| wt * mask.data()[i] * plane[i]).sum();
                let f = fill.at3(ch, r, col);
                out.set3(ch, r, col, premult + (1.0 - mw) * f);
            }
        }
    }
    Ok(any.then_some((out, out_mask)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurParams {
    pub applied: bool,
    pub sigma: f64,
}

impl BlurParams {
    pub fn sample(rng: &mut Rng) -> Self {
        let applied = rng.bernoulli(BLUR_PROB);
        let sigma = rng.range(BLUR_SIGMA_RANGE.0, BLUR_SIGMA_RANGE.1);
        Self { applied, sigma }
    }

    /// Separable Gaussian, `BLUR_TAPS` wide, clamped at the border.
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        if !self.applied {
            return Ok(image.clone());
        }
        let (c, h, w) = image.dims3()?;
        let half = (BLUR_TAPS / 2) as isize;
        let mut k: Vec<f64> = (-half..=half)
            .map(|i| (-(i * i) as f64 / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= total);
        let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let mut tmp = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let s = (-half..=half)
                        .zip(&k)
                        .map(|(d, wt)| wt * image.at3(ch, r, clampi(col as isize + d, w)))
                        .sum();
                    tmp.set3(ch, r, col, s);
                }
            }
        }
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let s = (-half..=half)
                        .zip(&k)
                        .map(|(d, wt)| wt * tmp.at3(ch, clampi(r as isize + d, h), col))
                        .sum();
                    out.set3(ch, r, col, s);
                }
            }
        }
        Ok(out)
    }
}

/// Every random choice of the foreground branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForegroundDraw {
    /// Top-left pixel of the swap patch in the other source.
    pub swap_origin: [usize; 2],
    pub jitter: JitterParams,
    pub geometry: GeometryParams,
    pub blur: BlurParams,
}

#[derive(Clone, Debug)]
pub struct ForegroundAug {
    /// `I_f^u`, `[3, S, S]` in `[0, 1]`.
    pub foreground_u: Tensor,
    pub mask_u: Tensor,
    /// `I_f^g`.
    pub foreground_g: Tensor,
    pub mask_g: Tensor,
    /// `I_f^g` before blurring.
    pub unblurred_g: Tensor,
    /// The jittered swap patch that fills pixels vacated by the warp.
    pub swapped_background: Tensor,
    pub draw: ForegroundDraw,
}

/// Foreground branch with fixed draws; fails when the warp leaves the frame
/// empty.
pub fn augment_foreground_with(
    record: &SourceRecord,
    other: &SourceRecord,
    fg_size: usize,
    draw: &ForegroundDraw,
) -> Result<ForegroundAug> {
    let (_, h, w) = record.image.dims3()?;
    let span = record.bbox.pixel_span(h, w);
    let (_, oh, ow) = other.image.dims3()?;
    let [sr, sc] = draw.swap_origin;
    if sr + span.height() > oh || sc + span.width() > ow {
        return Err(Error::geometry("swap patch does not fit in the other source"));
    }
    let swap_span = PixelSpan { r0: sr, r1: sr + span.height(), c0: sc, c1: sc + span.width() };
    let obj = resize_bilinear(&crop_span(&record.image, span)?, fg_size, fg_size)?;
    let mask = resize_nearest(&crop_span(&record.mask, span)?, fg_size, fg_size)?;
    if mask.data().iter().all(|&m| m == 0.0) {
        return Err(Error::geometry("object mask is empty"));
    }
    let swap = resize_bilinear(&crop_span(&other.image, swap_span)?, fg_size, fg_size)?;
    let hw = fg_size * fg_size;
    let mut composite = swap.clone();
    for ch in 0..3 {
        for i in 0..hw {
            if mask.data()[i] > 0.0 {
                composite.data_mut()[ch * hw + i] = obj.data()[ch * hw + i];
            }
        }
    }
    let mut jittered = draw.jitter.apply_many(&[&composite, &swap]);
    let swapped_background = jittered.pop().expect("two outputs");
    let foreground_u = jittered.pop().expect("two outputs");
    let (unblurred_g, mask_g) = warp_object(&foreground_u, &mask, &swapped_background, &draw.geometry)?
        .ok_or_else(|| Error::geometry("warp moved the object out of the frame"))?;
    Ok(ForegroundAug {
        foreground_g: draw.blur.apply(&unblurred_g)?,
        foreground_u,
        mask_u: mask,
        unblurred_g,
        mask_g,
        swapped_background,
        draw: draw.clone(),
    })
}

/// Background swap, illumination jitter, geometry warp and blur. Warp draws
/// that lose the object are redrawn up to `MAX_WARP_RETRIES` times.
pub fn augment_foreground(
    record: &SourceRecord,
    other: &SourceRecord,
    fg_size: usize,
    rng: &mut Rng,
) -> Result<ForegroundAug> {
    let (_, h, w) = record.image.dims3()?;
    let span = record.bbox.pixel_span(h, w);
    let (_, oh, ow) = other.image.dims3()?;
    if span.height() > oh || span.width() > ow {
        return Err(Error::geometry("other source is smaller than the object box"));
    }
    let swap_origin = [rng.below(oh - span.height() + 1), rng.below(ow - span.width() + 1)];
    let jitter = JitterParams::sample(rng);
    let blur = BlurParams::sample(rng);
    for _ in 0..MAX_WARP_RETRIES {
        let draw = ForegroundDraw {
            swap_origin,
            jitter: jitter.clone(),
            geometry: GeometryParams::sample(rng),
            blur: blur.clone(),
        };
        match augment_foreground_with(record, other, fg_size, &draw) {
            Err(Error::Geometry(msg)) if msg.contains("out of the frame") => continue,
            other => return other,
        }
    }
    Err(Error::geometry(format!("no valid warp after {MAX_WARP_RETRIES} draws")))
}

/// Replaces the object of `composite` (where `mask` is set) by
/// `foreground` stretched bilinearly over the box. Everything else is
/// copied bit for bit.
pub fn paste_object(composite: &Tensor, foreground: &Tensor, bbox: &BoundingBox, mask: &Tensor) -> Result<Tensor> {
    let (c, h, w) = composite.dims3()?;
    let (fc, fh, fw) = foreground.dims3()?;
    if fc != c || mask.shape() != [1, h, w] {
        return Err(Error::shape("paste inputs disagree in channels or size"));
    }
    let b = bbox.clamped()?;
    let span = b.pixel_span(h, w);
    let inside = (span.r0..span.r1).any(|r| (span.c0..span.c1).any(|col| mask.at3(0, r, col) > 0.0));
    if !inside {
        return Err(Error::geometry("object mask is empty inside the box"));
    }
    let (bw, bh) = (b.width() * w as f64, b.height() * h as f64);
    let mut out = composite.clone();
    for r in span.r0..span.r1 {
        let fy = (r as f64 + 0.5 - b.y0 * h as f64) / bh * fh as f64;
        for col in span.c0..span.c1 {
            let m = mask.at3(0, r, col);
            if m <= 0.0 {
                continue;
            }
            let fx = (col as f64 + 0.5 - b.x0 * w as f64) / bw * fw as f64;
            let v = bilinear_sample(foreground, fx, fy)?;
            for ch in 0..c {
                let orig = composite.at3(ch, r, col);
                out.set3(ch, r, col, m * v.data()[ch] + (1.0 - m) * orig);
            }
        }
    }
    Ok(out)
}

/// All draws behind one augmented pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentMeta {
    pub crop: CropParams,
    pub composite_jitter: JitterParams,
    pub foreground: ForegroundDraw,
}

#[derive(Clone, Debug)]
pub struct AugmentedPair {
    /// `I_c^u`: cropped and jittered source, `[3, H, W]` in `[0, 1]`.
    pub composite_u: Tensor,
    /// `I_c^n`: `I_c^u` with its object replaced by `I_f^u`'s.
    pub composite_n: Tensor,
    pub composite_mask: Tensor,
    pub foreground_u: Tensor,
    pub foreground_g: Tensor,
    pub mask_u: Tensor,
    pub mask_g: Tensor,
    pub bbox: BoundingBox,
    pub meta: AugmentMeta,
}

pub fn augment_pair(record: &SourceRecord, other: &SourceRecord, fg_size: usize, rng: &mut Rng) -> Result<AugmentedPair> {
    record.validate()?;
    let crop = CropParams::sample(&record.bbox, rng);
    let composite_jitter = JitterParams::sample(rng);
    let cropped = crop_record(record, &crop)?;
    let composite_u = composite_jitter.apply(&cropped.image);
    let fg = augment_foreground(&cropped, other, fg_size, rng)?;
    let composite_n = paste_object(&composite_u, &fg.foreground_u, &cropped.bbox, &cropped.mask)?;
    Ok(AugmentedPair {
        composite_u,
        composite_n,
        composite_mask: cropped.mask,
        foreground_u: fg.foreground_u,
        foreground_g: fg.foreground_g,
        mask_u: fg.mask_u,
        mask_g: fg.mask_g,
        bbox: cropped.bbox,
        meta: AugmentMeta { crop, composite_jitter, foreground: fg.draw },
    })
}
