//! Named parameters, forward sessions, basic layers and the Adam optimizer.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::rng::Rng;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.trainable.push(true);
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (i, n) in self.names.iter().enumerate() {
            if n.starts_with(prefix) {
                self.trainable[i] = trainable;
            }
        }
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn numel(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }

    /// Overwrites every parameter from `map`; names and shapes must match.
    pub fn load_map(&mut self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let t = map
                .get(name)
                .ok_or_else(|| Error::State(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::State(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = t.clone();
        }
        Ok(())
    }
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: (0..store.len()).map(|_| None).collect() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn accumulate(&mut self, other: &ParamGrads) -> Result<()> {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b)?,
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g = g.scale(s);
        }
    }
}

/// One forward pass: a fresh tape plus lazily inserted parameter leaves.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { graph: Graph::new(), store, vars: vec![None; store.len()] }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Tape handle of a parameter; frozen parameters enter as constants.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.vars[id.0] {
            return Ok(v);
        }
        let t = self.store.get(id).clone();
        let v = if self.store.is_trainable(id) { self.graph.leaf(t)? } else { self.graph.constant(t)? };
        self.vars[id.0] = Some(v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let mut g = self.graph.backward(loss)?;
        let grads = self.vars.iter().map(|v| v.and_then(|v| g.take(v))).collect();
        Ok(ParamGrads { grads })
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `U(−1/√fan_in, 1/√fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
    Normal(f64),
}

impl Init {
    pub fn tensor(self, shape: &[usize], rng: &mut Rng) -> Tensor {
        match self {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::uniform(shape, -bound, bound, rng)
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Normal(std) => Tensor::randn(shape, rng).scale(std),
        }
    }
}

/// Affine map on the rows of `[n, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        zero_init: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let init = if zero_init { Init::Zeros } else { Init::FanIn(fan_in) };
        let weight = store.add(&format!("{name}.weight"), init.tensor(&[fan_out, fan_in], rng))?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight)?;
        let y = s.graph.matmul(x, w, true)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b)?;
                s.graph.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        zero_init: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let init = if zero_init { Init::Zeros } else { Init::FanIn(cin * k * k) };
        let weight = store.add(&format!("{name}.weight"), init.tensor(&[cout, cin, k, k], rng))?;
        let bias = Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[cout]))?);
        Ok(Self { weight, bias, stride, padding: k / 2 })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight)?;
        let b = self.bias.map(|b| s.param(b)).transpose()?;
        s.graph.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Group normalization with a learned per-channel affine map.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::config(format!("{name}: {groups} groups for {channels} channels")));
        }
        Ok(Self {
            groups,
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones(&[channels]))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let n = s.graph.group_norm(x, self.groups, self.eps)?;
        let (g, b) = (s.param(self.gamma)?, s.param(self.beta)?);
        let y = s.graph.mul_channel(n, g)?;
        s.graph.add_channel(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones(&[dim]))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let n = s.graph.layer_norm(x, self.eps)?;
        let (g, b) = (s.param(self.gamma)?, s.param(self.beta)?);
        let y = s.graph.mul_row(n, g)?;
        s.graph.add_row(y, b)
    }
}

/// Single-head scaled dot-product attention with learned projections.
/// Queries come from `x`, keys and values from `context`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub dim: usize,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        context_dim: usize,
        dim: usize,
        zero_out: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), query_dim, dim, false, false, rng)?,
            k: Linear::new(store, &format!("{name}.k"), context_dim, dim, false, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), context_dim, dim, false, false, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, query_dim, true, zero_out, rng)?,
            dim,
        })
    }

    /// Returns the projected output `[n, query_dim]` and the weights `[n, m]`.
    pub fn forward(&self, s: &mut Session, x: Var, context: Var) -> Result<(Var, Var)> {
        let q = self.q.forward(s, x)?;
        let k = self.k.forward(s, context)?;
        let v = self.v.forward(s, context)?;
        let logits = s.graph.matmul(q, k, true)?;
        let logits = s.graph.scale(logits, 1.0 / (self.dim as f64).sqrt())?;
        let weights = s.graph.softmax_rows(logits)?;
        let mixed = s.graph.matmul(weights, v, false)?;
        Ok((self.out.forward(s, mixed)?, weights))
    }
}

/// Stack of linear layers with GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut Rng) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, &format!("{name}.{i}"), d[0], d[1], true, false, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, s: &mut Session, mut x: Var) -> Result<Var> {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                x = s.graph.gelu(x)?;
            }
            x = l.forward(s, x)?;
        }
        Ok(x)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.0;
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(id);
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moment tensors keyed `m/<param>` and `v/<param>`.
    pub fn state_map(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for id in store.ids() {
            if let Some(m) = self.m.get(id.0).and_then(|m| m.as_ref()) {
                out.insert(format!("m/{}", store.name(id)), m.clone());
            }
            if let Some(v) = self.v.get(id.0).and_then(|v| v.as_ref()) {
                out.insert(format!("v/{}", store.name(id)), v.clone());
            }
        }
        out
    }

    pub fn load_state_map(&mut self, store: &ParamStore, map: &BTreeMap<String, Tensor>, step: u64) {
        self.m = store.ids().map(|id| map.get(&format!("m/{}", store.name(id))).cloned()).collect();
        self.v = store.ids().map(|id| map.get(&format!("v/{}", store.name(id))).cloned()).collect();
        self.step = step;
    }
}
