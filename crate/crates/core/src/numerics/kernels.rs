//! Value-level array kernels.
//!
//! These are pure functions over [`Tensor`]; the autodiff tape in
//! [`crate::numerics::graph`] calls them for its forward passes and adds the
//! matching adjoints.

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::numerics::Tensor;

/// `c = a·b` (or `c += a·b` when `accumulate`), with `a` logically `[m, k]`
/// and `b` logically `[k, n]`. A transposed flag means the operand is stored
/// as the transpose of its logical shape.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `[n, k] · [k, m]` (or `[n, k] · [m, k]ᵀ` when `b_trans`).
pub fn matmul(a: &Tensor, b: &Tensor, b_trans: bool) -> Result<Tensor> {
    let (n, k) = a.dims2()?;
    let (b0, b1) = b.dims2()?;
    let (kb, m) = if b_trans { (b1, b0) } else { (b0, b1) };
    if k != kb {
        return Err(Error::shape(format!(
            "matmul inner extents {:?} x {:?}{}",
            a.shape(),
            b.shape(),
            if b_trans { "ᵀ" } else { "" }
        )));
    }
    let mut out = vec![0.0; n * m];
    gemm(n, k, m, a.data(), false, b.data(), b_trans, &mut out, false);
    Tensor::new(&[n, m], out)
}

pub fn transpose2(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    let d = x.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::new(&[c, r], out)
}

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if k % 2 == 0 || stride == 0 {
            return Err(Error::shape(format!("conv kernel {k} must be odd, stride {stride} > 0")));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(format!("conv kernel {k} larger than padded {h}x{w}")));
        }
        // Trailing rows/columns that do not fill a full stride are dropped,
        // as in the usual floor convention.
        let (sh, sw) = (h + 2 * pad - k, w + 2 * pad - k);
        Ok(Self { c, h, w, k, stride, pad, ho: sh / stride + 1, wo: sw / stride + 1 })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    /// `[C·k·k, Ho·Wo]` column matrix.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let olen = self.out_len();
        for ci in 0..self.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * olen..(row + 1) * olen];
                    for oy in 0..self.ho {
                        let iy = (oy * s + ky) as isize - p;
                        let drow = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            drow.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &x[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *d = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let olen = self.out_len();
        for ci in 0..self.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * olen..(row + 1) * olen];
                    for oy in 0..self.ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (ci * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                dx[base + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Splits a rank-3 `[C,H,W]` or rank-4 `[N,C,H,W]` shape into `(N, C, H, W)`.
pub(crate) fn nchw(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(format!("expected [C,H,W] or [N,C,H,W], got {shape:?}"))),
    }
}

fn with_batch(input_shape: &[usize], n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if input_shape.len() == 3 {
        vec![c, h, w]
    } else {
        vec![n, c, h, w]
    }
}

pub(crate) fn conv_geom(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<ConvGeom> {
    let (_, c, h, w) = nchw(input.shape())?;
    let (wc, k, k2) = match *weight.shape() {
        [_, wc, k, k2] => (wc, k, k2),
        ref s => return Err(Error::shape(format!("conv weight must be [O,C,k,k], got {s:?}"))),
    };
    if wc != c || k != k2 {
        return Err(Error::shape(format!(
            "conv weight {:?} does not match input {:?}",
            weight.shape(),
            input.shape()
        )));
    }
    ConvGeom::new(c, h, w, k, stride, padding)
}

/// Cross-correlation of `[N,C,H,W]` (or `[C,H,W]`) with `[O,C,k,k]` weights.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = conv_geom(input, weight, stride, padding)?;
    let (n, ..) = nchw(input.shape())?;
    let o = weight.shape()[0];
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::shape(format!("conv bias {:?} for {o} outputs", b.shape())));
        }
    }
    let (plen, olen) = (g.patch_len(), g.out_len());
    let in_len = g.c * g.h * g.w;
    let mut out = vec![0.0; n * o * olen];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; plen * olen] };
    for ni in 0..n {
        let x = &input.data()[ni * in_len..(ni + 1) * in_len];
        let dst = &mut out[ni * o * olen..(ni + 1) * o * olen];
        let cols_ref: &[f64] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut cols);
            &cols
        };
        gemm(o, plen, olen, weight.data(), false, cols_ref, false, dst, false);
        if let Some(b) = bias {
            for (oi, row) in dst.chunks_mut(olen).enumerate() {
                let bv = b.data()[oi];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(&with_batch(input.shape(), n, o, g.ho, g.wo), out)
}

/// Adjoints of [`conv2d`]: `(d_input, d_weight, d_bias)`.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    dout: &Tensor,
    stride: usize,
    padding: usize,
    want_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let g = conv_geom(input, weight, stride, padding)?;
    let (n, ..) = nchw(input.shape())?;
    let o = weight.shape()[0];
    let (plen, olen) = (g.patch_len(), g.out_len());
    let in_len = g.c * g.h * g.w;
    let mut dw = vec![0.0; o * plen];
    let mut db = vec![0.0; o];
    let mut dx = if want_input { vec![0.0; input.len()] } else { Vec::new() };
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; plen * olen] };
    let mut dcols = vec![0.0; plen * olen];
    for ni in 0..n {
        let x = &input.data()[ni * in_len..(ni + 1) * in_len];
        let dy = &dout.data()[ni * o * olen..(ni + 1) * o * olen];
        for (oi, row) in dy.chunks(olen).enumerate() {
            db[oi] += row.iter().sum::<f64>();
        }
        let cols_ref: &[f64] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut cols);
            &cols
        };
        // dW[o, p] += dY[o, j] · cols[p, j]
        gemm(o, olen, plen, dy, false, cols_ref, true, &mut dw, true);
        if want_input {
            let dxs = &mut dx[ni * in_len..(ni + 1) * in_len];
            if g.is_pointwise() {
                gemm(plen, o, olen, weight.data(), true, dy, false, dxs, true);
            } else {
                gemm(plen, o, olen, weight.data(), true, dy, false, &mut dcols, false);
                g.col2im_add(&dcols, dxs);
            }
        }
    }
    let dx = if want_input { Some(Tensor::new(input.shape(), dx)?) } else { None };
    Ok((dx, Tensor::new(weight.shape(), dw)?, Tensor::from_vec(db)))
}

/// Row-wise softmax of a `[n, m]` matrix.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (n, m) = x.dims2()?;
    if m == 0 {
        return Err(Error::shape("softmax over an empty row"));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(m).take(n) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(&[n, m], out)
}

/// Scaled dot-product attention: returns `(weights·v, weights)` with
/// `weights = softmax(q·kᵀ / √d)`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, d) = q.dims2()?;
    let (m, dk) = k.dims2()?;
    let (mv, _) = v.dims2()?;
    if m == 0 {
        return Err(Error::shape("attention over an empty key set"));
    }
    if d == 0 || d != dk || m != mv {
        return Err(Error::shape(format!(
            "attention q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let logits = matmul(q, k, true)?.scale(1.0 / (d as f64).sqrt());
    let weights = softmax_rows(&logits)?;
    let out = matmul(&weights, v, false)?;
    Ok((out, weights))
}

/// Parameter-free group normalization; returns the normalized tensor and the
/// reciprocal standard deviation of every `(sample, group)`.
pub(crate) fn group_norm_core(x: &Tensor, groups: usize, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let (n, c, h, w) = nchw(x.shape())?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(format!("{groups} groups do not divide {c} channels")));
    }
    if eps <= 0.0 {
        return Err(Error::config("group norm eps must be positive"));
    }
    let glen = (c / groups) * h * w;
    let mut out = x.data().to_vec();
    let mut rstds = Vec::with_capacity(n * groups);
    for chunk in out.chunks_mut(glen) {
        let mean = chunk.iter().sum::<f64>() / glen as f64;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / glen as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        chunk.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
        rstds.push(rstd);
    }
    Ok((Tensor::new(x.shape(), out)?, rstds))
}

/// Group normalization followed by a per-channel affine map.
pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (_, c, h, w) = nchw(x.shape())?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!("group norm affine must be [{c}]")));
    }
    let (mut y, _) = group_norm_core(x, groups, eps)?;
    let hw = h * w;
    for (i, chunk) in y.data_mut().chunks_mut(hw).enumerate() {
        let ci = i % c;
        let (g, b) = (gamma.data()[ci], beta.data()[ci]);
        chunk.iter_mut().for_each(|v| *v = *v * g + b);
    }
    Ok(y)
}

/// Parameter-free normalization of each row of `[n, d]`.
pub(crate) fn layer_norm_core(x: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let (_, d) = x.dims2()?;
    let mut out = x.data().to_vec();
    let mut rstds = Vec::new();
    for row in out.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
        rstds.push(rstd);
    }
    Ok((Tensor::new(x.shape(), out)?, rstds))
}

/// Interpolation taps along one axis of length `n` for a continuous
/// coordinate with pixel centers at `i + 0.5`, clamped to the border.
#[inline]
pub(crate) fn taps(n: usize, coord: f64) -> (usize, usize, f64) {
    let u = (coord - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = u.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, u - i0 as f64)
}

/// Four `(flat index within a channel, weight)` pairs for a bilinear read.
#[inline]
pub(crate) fn bilinear_weights(h: usize, w: usize, x: f64, y: f64) -> [(usize, f64); 4] {
    let (x0, x1, fx) = taps(w, x);
    let (y0, y1, fy) = taps(h, y);
    [
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ]
}

/// Bilinear read of every channel of a `[C,H,W]` map at continuous pixel
/// coordinates (align-corners = false, border clamp).
pub fn bilinear_sample(map: &Tensor, x: f64, y: f64) -> Result<Tensor> {
    let (c, h, w) = map.dims3()?;
    let wts = bilinear_weights(h, w, x, y);
    let hw = h * w;
    Ok(Tensor::from_fn(&[c], |ci| {
        let plane = &map.data()[ci * hw..(ci + 1) * hw];
        wts.iter().map(|&(i, wt)| wt * plane[i]).sum()
    }))
}

/// Bin-center sample coordinates `(x, y)` of a `p × p` RoIAlign grid over a
/// box on an `h × w` map, row-major over bins.
pub(crate) fn roi_points(bbox: &BoundingBox, h: usize, w: usize, p: usize) -> Result<Vec<(f64, f64)>> {
    let b = bbox.clamped()?;
    if p == 0 {
        return Err(Error::shape("RoIAlign output size must be positive"));
    }
    let (bx0, by0) = (b.x0 * w as f64, b.y0 * h as f64);
    let bin_w = b.width() * w as f64 / p as f64;
    let bin_h = b.height() * h as f64 / p as f64;
    let mut pts = Vec::with_capacity(p * p);
    for i in 0..p {
        for j in 0..p {
            pts.push((bx0 + (j as f64 + 0.5) * bin_w, by0 + (i as f64 + 0.5) * bin_h));
        }
    }
    Ok(pts)
}

/// RoIAlign with one bilinear sample per bin: `[C,H,W] → [C,p,p]`.
pub fn roi_align(map: &Tensor, bbox: &BoundingBox, p: usize) -> Result<Tensor> {
    let (c, h, w) = map.dims3()?;
    let pts = roi_points(bbox, h, w, p)?;
    let hw = h * w;
    let mut out = vec![0.0; c * p * p];
    for (bi, &(x, y)) in pts.iter().enumerate() {
        let wts = bilinear_weights(h, w, x, y);
        for ci in 0..c {
            let plane = &map.data()[ci * hw..(ci + 1) * hw];
            out[ci * p * p + bi] = wts.iter().map(|&(i, wt)| wt * plane[i]).sum();
        }
    }
    Tensor::new(&[c, p, p], out)
}

pub(crate) fn roi_align_backward(
    dout: &Tensor,
    bbox: &BoundingBox,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
) -> Result<Tensor> {
    let pts = roi_points(bbox, h, w, p)?;
    let hw = h * w;
    let mut dx = vec![0.0; c * hw];
    for (bi, &(x, y)) in pts.iter().enumerate() {
        let wts = bilinear_weights(h, w, x, y);
        for ci in 0..c {
            let g = dout.data()[ci * p * p + bi];
            for &(i, wt) in &wts {
                dx[ci * hw + i] += wt * g;
            }
        }
    }
    Tensor::new(&[c, h, w], dx)
}

/// For every pixel touched by the box on an `h × w` map, the bilinear taps
/// into a `p × p` patch that spans the box (the inverse grid of RoIAlign).
pub(crate) fn box_paste_plan(
    bbox: &BoundingBox,
    h: usize,
    w: usize,
    p: usize,
) -> Result<Vec<(usize, [(usize, f64); 4])>> {
    let b = bbox.clamped()?;
    let span = b.pixel_span(h, w);
    let bin_w = b.width() * w as f64 / p as f64;
    let bin_h = b.height() * h as f64 / p as f64;
    let mut plan = Vec::with_capacity(span.height() * span.width());
    for r in span.r0..span.r1 {
        let py = (r as f64 + 0.5 - b.y0 * h as f64) / bin_h;
        for cc in span.c0..span.c1 {
            let px = (cc as f64 + 0.5 - b.x0 * w as f64) / bin_w;
            plan.push((r * w + cc, bilinear_weights(p, p, px, py)));
        }
    }
    Ok(plan)
}

/// Bilinearly resizes a `[C,p,p]` patch onto the box region of a `[C,H,W]`
/// map and adds it there; pixels outside the box are copied unchanged.
pub fn box_add(map: &Tensor, patch: &Tensor, bbox: &BoundingBox) -> Result<Tensor> {
    let (c, h, w) = map.dims3()?;
    let (pc, p, p2) = patch.dims3()?;
    if pc != c || p != p2 {
        return Err(Error::shape(format!(
            "patch {:?} incompatible with map {:?}",
            patch.shape(),
            map.shape()
        )));
    }
    let plan = box_paste_plan(bbox, h, w, p)?;
    let mut out = map.clone();
    let (hw, pp) = (h * w, p * p);
    for ci in 0..c {
        let src = &patch.data()[ci * pp..(ci + 1) * pp];
        let dst = &mut out.data_mut()[ci * hw..(ci + 1) * hw];
        for (pix, wts) in &plan {
            dst[*pix] += wts.iter().map(|&(i, wt)| wt * src[i]).sum::<f64>();
        }
    }
    Ok(out)
}

pub(crate) fn box_add_patch_backward(dout: &Tensor, bbox: &BoundingBox, p: usize) -> Result<Tensor> {
    let (c, h, w) = dout.dims3()?;
    let plan = box_paste_plan(bbox, h, w, p)?;
    let (hw, pp) = (h * w, p * p);
    let mut dp = vec![0.0; c * pp];
    for ci in 0..c {
        let g = &dout.data()[ci * hw..(ci + 1) * hw];
        let dst = &mut dp[ci * pp..(ci + 1) * pp];
        for (pix, wts) in &plan {
            for &(i, wt) in wts {
                dst[i] += wt * g[*pix];
            }
        }
    }
    Tensor::new(&[c, p, p], dp)
}

/// Nearest-neighbour ×2 upsampling of `[C,H,W]`.
pub fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (oh, ow) = (2 * h, 2 * w);
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let (ci, r, cc) = (i / (oh * ow), (i / ow) % oh, i % ow);
        x.data()[(ci * h + r / 2) * w + cc / 2]
    }))
}

pub(crate) fn upsample_nearest2_backward(dout: &Tensor) -> Result<Tensor> {
    let (c, oh, ow) = dout.dims3()?;
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = vec![0.0; c * h * w];
    for (i, g) in dout.data().iter().enumerate() {
        let (ci, r, cc) = (i / (oh * ow), (i / ow) % oh, i % ow);
        dx[(ci * h + r / 2) * w + cc / 2] += g;
    }
    Tensor::new(&[c, h, w], dx)
}

/// Bilinear resize of `[C,H,W]` to `[C,oh,ow]` (align-corners = false).
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if (oh, ow) == (h, w) {
        return Ok(x.clone());
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = vec![0.0; c * oh * ow];
    for r in 0..oh {
        for cc in 0..ow {
            let wts = bilinear_weights(h, w, (cc as f64 + 0.5) * sx, (r as f64 + 0.5) * sy);
            for ci in 0..c {
                let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
                out[(ci * oh + r) * ow + cc] = wts.iter().map(|&(i, wt)| wt * plane[i]).sum();
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Nearest-neighbour resize of `[C,H,W]`; keeps binary masks binary.
pub fn resize_nearest(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let (ci, r, cc) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let sr = (((r as f64 + 0.5) * h as f64 / oh as f64) as usize).min(h - 1);
        let sc = (((cc as f64 + 0.5) * w as f64 / ow as f64) as usize).min(w - 1);
        x.data()[(ci * h + sr) * w + sc]
    }))
}
