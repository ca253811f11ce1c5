//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s together with the
//! forward value. [`Graph::backward`] walks the tape once in reverse and
//! returns the adjoint of every node that depends on a differentiable leaf.
//! Each op checks its output for non-finite values.

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::numerics::kernels::{self, nchw};
use crate::numerics::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `[C, ...]` plus a `[C]` vector broadcast over trailing axes.
    AddChannel(Var, Var),
    /// `[C, ...]` times a `[C]` vector broadcast over trailing axes.
    MulChannel(Var, Var),
    /// `[n, d]` plus a `[d]` vector added to every row.
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul { a: Var, b: Var, b_trans: bool },
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Silu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    GroupNorm { x: Var, groups: usize, rstd: Vec<f64> },
    LayerNorm { x: Var, rstd: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Upsample2(Var),
    RoiAlign { x: Var, bbox: BoundingBox, p: usize },
    BoxAdd { x: Var, patch: Var, bbox: BoundingBox },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Clamp { x: Var, lo: f64, hi: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite output from {op:?}")));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), f)?;
        let g = self.any_grad(&[a, b]);
        self.push(v, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).scale(s);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Scale(a, s), g)
    }

    fn channel_broadcast(&self, x: Var, v: Var) -> Result<(usize, usize)> {
        let xs = self.shape(x);
        let c = *xs.first().ok_or_else(|| Error::shape("channel op on a scalar"))?;
        if self.shape(v) != [c] {
            return Err(Error::shape(format!(
                "channel vector {:?} for tensor {xs:?}",
                self.shape(v)
            )));
        }
        Ok((c, xs[1..].iter().product()))
    }

    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (_, inner) = self.channel_broadcast(x, v)?;
        let mut out = self.value(x).clone();
        let vec = self.value(v).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(inner.max(1)).enumerate() {
            chunk.iter_mut().for_each(|a| *a += vec[i]);
        }
        let g = self.any_grad(&[x, v]);
        self.push(out, Op::AddChannel(x, v), g)
    }

    pub fn mul_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (_, inner) = self.channel_broadcast(x, v)?;
        let mut out = self.value(x).clone();
        let vec = self.value(v).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(inner.max(1)).enumerate() {
            chunk.iter_mut().for_each(|a| *a *= vec[i]);
        }
        let g = self.any_grad(&[x, v]);
        self.push(out, Op::MulChannel(x, v), g)
    }

    fn row_broadcast(&self, x: Var, v: Var) -> Result<usize> {
        let (_, d) = self.value(x).dims2()?;
        if self.shape(v) != [d] {
            return Err(Error::shape(format!(
                "row vector {:?} for matrix {:?}",
                self.shape(v),
                self.shape(x)
            )));
        }
        Ok(d)
    }

    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let d = self.row_broadcast(x, v)?;
        let mut out = self.value(x).clone();
        let vec = self.value(v).data().to_vec();
        for row in out.data_mut().chunks_mut(d) {
            row.iter_mut().zip(&vec).for_each(|(a, b)| *a += b);
        }
        let g = self.any_grad(&[x, v]);
        self.push(out, Op::AddRow(x, v), g)
    }

    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let d = self.row_broadcast(x, v)?;
        let mut out = self.value(x).clone();
        let vec = self.value(v).data().to_vec();
        for row in out.data_mut().chunks_mut(d) {
            row.iter_mut().zip(&vec).for_each(|(a, b)| *a *= b);
        }
        let g = self.any_grad(&[x, v]);
        self.push(out, Op::MulRow(x, v), g)
    }

    /// `a · b` for `[n,k]·[k,m]`, or `a · bᵀ` for `[n,k]·[m,k]` when `b_trans`.
    pub fn matmul(&mut self, a: Var, b: Var, b_trans: bool) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b), b_trans)?;
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::MatMul { a, b, b_trans }, g)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = kernels::transpose2(self.value(x))?;
        let g = self.any_grad(&[x]);
        self.push(v, Op::Transpose(x), g)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let g = self.any_grad(&[x]);
        self.push(v, Op::Reshape(x), g)
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat(&vals)?;
        let g = self.any_grad(parts);
        self.push(v, Op::Concat(parts.to_vec()), g)
    }

    /// Leading-axis slice `[start, end)`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let lead = *t.shape().first().ok_or_else(|| Error::shape("slice of a scalar"))?;
        if start >= end || end > lead {
            return Err(Error::shape(format!("slice {start}..{end} of {lead} rows")));
        }
        let inner: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[0] = end - start;
        let v = Tensor::new(&shape, t.data()[start * inner..end * inner].to_vec())?;
        let g = self.any_grad(&[x]);
        self.push(v, Op::SliceRows { x, start }, g)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a * sigmoid(a));
        let g = self.any_grad(&[x]);
        self.push(v, Op::Silu(x), g)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self
            .value(x)
            .map(|a| 0.5 * a * (1.0 + (GELU_C * (a + 0.044715 * a * a * a)).tanh()));
        let g = self.any_grad(&[x]);
        self.push(v, Op::Gelu(x), g)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = kernels::softmax_rows(self.value(x))?;
        let g = self.any_grad(&[x]);
        self.push(v, Op::SoftmaxRows(x), g)
    }

    /// Parameter-free group normalization of `[C,H,W]` or `[N,C,H,W]`.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let (v, rstd) = kernels::group_norm_core(self.value(x), groups, eps)?;
        let g = self.any_grad(&[x]);
        self.push(v, Op::GroupNorm { x, groups, rstd }, g)
    }

    /// Parameter-free normalization of each row of `[n, d]`.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (v, rstd) = kernels::layer_norm_core(self.value(x), eps)?;
        let g = self.any_grad(&[x]);
        self.push(v, Op::LayerNorm { x, rstd }, g)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let v = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.any_grad(&deps);
        self.push(v, Op::Conv2d { x, w, b, stride, pad }, g)
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let v = kernels::upsample_nearest2(self.value(x))?;
        let g = self.any_grad(&[x]);
        self.push(v, Op::Upsample2(x), g)
    }

    pub fn roi_align(&mut self, x: Var, bbox: &BoundingBox, p: usize) -> Result<Var> {
        let v = kernels::roi_align(self.value(x), bbox, p)?;
        let g = self.any_grad(&[x]);
        self.push(v, Op::RoiAlign { x, bbox: *bbox, p }, g)
    }

    pub fn box_add(&mut self, x: Var, patch: Var, bbox: &BoundingBox) -> Result<Var> {
        let v = kernels::box_add(self.value(x), self.value(patch), bbox)?;
        let g = self.any_grad(&[x, patch]);
        self.push(v, Op::BoxAdd { x, patch, bbox: *bbox }, g)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        let g = self.any_grad(&[x]);
        self.push(v, Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).mean());
        let g = self.any_grad(&[x]);
        self.push(v, Op::Mean(x), g)
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_same_shape(vb)?;
        let n = va.len().max(1) as f64;
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let g = self.any_grad(&[a, b]);
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), g)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let v = self.value(x).map(|a| a.clamp(lo, hi));
        let g = self.any_grad(&[x]);
        self.push(v, Op::Clamp { x, lo, hi }, g)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward from non-scalar {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot => *slot = Some(g),
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone())?;
                self.accumulate(grads, *b, dy.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone())?;
                self.accumulate(grads, *b, dy.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    self.accumulate(grads, *a, dy.zip_map(self.value(*b), |g, y| g * y)?)?;
                }
                if ng(*b) {
                    self.accumulate(grads, *b, dy.zip_map(self.value(*a), |g, x| g * x)?)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, dy.scale(*s))?,
            Op::AddChannel(x, v) => {
                self.accumulate(grads, *x, dy.clone())?;
                if ng(*v) {
                    let c = self.shape(*v)[0];
                    let inner = dy.len() / c;
                    let dv = Tensor::from_fn(&[c], |i| dy.data()[i * inner..(i + 1) * inner].iter().sum());
                    self.accumulate(grads, *v, dv)?;
                }
            }
            Op::MulChannel(x, v) => {
                let c = self.shape(*v)[0];
                let inner = dy.len() / c;
                let vv = self.value(*v).data();
                if ng(*x) {
                    let dx = Tensor::from_fn(dy.shape(), |i| dy.data()[i] * vv[i / inner]);
                    self.accumulate(grads, *x, dx)?;
                }
                if ng(*v) {
                    let xv = self.value(*x).data();
                    let dv = Tensor::from_fn(&[c], |ci| {
                        (ci * inner..(ci + 1) * inner).map(|i| dy.data()[i] * xv[i]).sum()
                    });
                    self.accumulate(grads, *v, dv)?;
                }
            }
            Op::AddRow(x, v) => {
                self.accumulate(grads, *x, dy.clone())?;
                if ng(*v) {
                    let d = self.shape(*v)[0];
                    let mut dv = vec![0.0; d];
                    for row in dy.data().chunks(d) {
                        dv.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    self.accumulate(grads, *v, Tensor::from_vec(dv))?;
                }
            }
            Op::MulRow(x, v) => {
                let d = self.shape(*v)[0];
                let vv = self.value(*v).data();
                if ng(*x) {
                    let dx = Tensor::from_fn(dy.shape(), |i| dy.data()[i] * vv[i % d]);
                    self.accumulate(grads, *x, dx)?;
                }
                if ng(*v) {
                    let xv = self.value(*x).data();
                    let mut dv = vec![0.0; d];
                    for (i, g) in dy.data().iter().enumerate() {
                        dv[i % d] += g * xv[i];
                    }
                    self.accumulate(grads, *v, Tensor::from_vec(dv))?;
                }
            }
            Op::MatMul { a, b, b_trans } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k) = av.dims2()?;
                let m = dy.shape()[1];
                if ng(*a) {
                    // dA[n,k] = dY[n,m] · B'ᵀ, where B' is the logical [k,m] operand.
                    let mut da = vec![0.0; n * k];
                    kernels::gemm(n, m, k, dy.data(), false, bv.data(), !*b_trans, &mut da, false);
                    self.accumulate(grads, *a, Tensor::new(av.shape(), da)?)?;
                }
                if ng(*b) {
                    let mut db = vec![0.0; k * m];
                    if *b_trans {
                        // stored [m,k]: dB = dYᵀ · A
                        kernels::gemm(m, n, k, dy.data(), true, av.data(), false, &mut db, false);
                    } else {
                        // stored [k,m]: dB = Aᵀ · dY
                        kernels::gemm(k, n, m, av.data(), true, dy.data(), false, &mut db, false);
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), db)?)?;
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, kernels::transpose2(dy)?)?,
            Op::Reshape(x) => {
                self.accumulate(grads, *x, dy.clone().reshape(self.shape(*x))?)?;
            }
            Op::Concat(parts) => {
                let inner: usize = dy.shape()[1..].iter().product();
                let mut offset = 0;
                for p in parts {
                    let shape = self.shape(*p).to_vec();
                    let len = shape[0] * inner;
                    if ng(*p) {
                        let slice = dy.data()[offset..offset + len].to_vec();
                        self.accumulate(grads, *p, Tensor::new(&shape, slice)?)?;
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let xs = self.shape(*x).to_vec();
                let inner: usize = xs[1..].iter().product();
                let mut dx = Tensor::zeros(&xs);
                dx.data_mut()[start * inner..start * inner + dy.len()].copy_from_slice(dy.data());
                self.accumulate(grads, *x, dx)?;
            }
            Op::Silu(x) => {
                let dx = dy.zip_map(self.value(*x), |g, a| {
                    let s = sigmoid(a);
                    g * s * (1.0 + a * (1.0 - s))
                })?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Gelu(x) => {
                let dx = dy.zip_map(self.value(*x), |g, a| {
                    let inner = GELU_C * (a + 0.044715 * a * a * a);
                    let t = inner.tanh();
                    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * a * a);
                    g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner)
                })?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (_, m) = y.dims2()?;
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks(m).zip(dy.data().chunks(m)).zip(dx.chunks_mut(m)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape(), dx)?)?;
            }
            Op::GroupNorm { x, groups, rstd } => {
                let (_, c, h, w) = nchw(node.value.shape())?;
                let glen = (c / groups) * h * w;
                let dx = normalize_backward(node.value.data(), dy.data(), rstd, glen);
                self.accumulate(grads, *x, Tensor::new(node.value.shape(), dx)?)?;
            }
            Op::LayerNorm { x, rstd } => {
                let (_, d) = node.value.dims2()?;
                let dx = normalize_backward(node.value.data(), dy.data(), rstd, d);
                self.accumulate(grads, *x, Tensor::new(node.value.shape(), dx)?)?;
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    dy,
                    *stride,
                    *pad,
                    ng(*x),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx)?;
                }
                self.accumulate(grads, *w, dw)?;
                if let Some(b) = b {
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Upsample2(x) => self.accumulate(grads, *x, kernels::upsample_nearest2_backward(dy)?)?,
            Op::RoiAlign { x, bbox, p } => {
                let (c, h, w) = self.value(*x).dims3()?;
                self.accumulate(grads, *x, kernels::roi_align_backward(dy, bbox, c, h, w, *p)?)?;
            }
            Op::BoxAdd { x, patch, bbox } => {
                self.accumulate(grads, *x, dy.clone())?;
                if ng(*patch) {
                    let p = self.shape(*patch)[1];
                    self.accumulate(grads, *patch, kernels::box_add_patch_backward(dy, bbox, p)?)?;
                }
            }
            Op::Sum(x) => {
                let g = dy.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g))?;
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), dy.item() / n))?;
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = 2.0 * dy.item() / va.len().max(1) as f64;
                let da = va.zip_map(vb, |x, y| k * (x - y))?;
                if ng(*b) {
                    self.accumulate(grads, *b, da.scale(-1.0))?;
                }
                self.accumulate(grads, *a, da)?;
            }
            Op::Clamp { x, lo, hi } => {
                let dx = dy.zip_map(self.value(*x), |g, a| if a < *lo || a > *hi { 0.0 } else { g })?;
                self.accumulate(grads, *x, dx)?;
            }
        }
        Ok(())
    }
}

/// Adjoint of `x̂ = (x − μ)·rstd` over consecutive chunks of `len` values.
fn normalize_backward(xhat: &[f64], dy: &[f64], rstd: &[f64], len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; xhat.len()];
    for (((xc, gc), dc), r) in xhat.chunks(len).zip(dy.chunks(len)).zip(dx.chunks_mut(len)).zip(rstd) {
        let n = len as f64;
        let mean_g = gc.iter().sum::<f64>() / n;
        let mean_gx = gc.iter().zip(xc).map(|(g, x)| g * x).sum::<f64>() / n;
        for j in 0..len {
            dc[j] = r * (gc[j] - mean_g - xc[j] * mean_gx);
        }
    }
    dx
}
