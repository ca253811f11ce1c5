//! Central-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::nn::{ParamStore, Session};
use crate::numerics::rng::Rng;
use crate::numerics::Tensor;

/// `|a − b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn eval_scalar(f: &dyn Fn(&mut Graph, Var) -> Result<Var>, x: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let out = f(&mut g, xv)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::shape(format!("grad check needs a scalar, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Largest relative error between the tape gradient of `f` at `x` and a
/// central difference with step `h`, over every coordinate of `x`.
pub fn grad_check(f: &dyn Fn(&mut Graph, Var) -> Result<Var>, x: &Tensor, h: f64) -> Result<f64> {
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, h, &coords)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords(
    f: &dyn Fn(&mut Graph, Var) -> Result<Var>,
    x: &Tensor,
    h: f64,
    coords: &[usize],
) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone())?;
    let out = f(&mut g, xv)?;
    let grads = g.backward(out)?;
    let zeros = Tensor::zeros(x.shape());
    let analytic = grads.get(xv).unwrap_or(&zeros);
    let mut worst = 0.0f64;
    for &i in coords {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let fp = eval_scalar(f, &xp)?;
        xp.data_mut()[i] -= 2.0 * h;
        let fm = eval_scalar(f, &xp)?;
        let fd = (fp - fm) / (2.0 * h);
        let ad = analytic.data()[i];
        if !fd.is_finite() || !ad.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient at coordinate {i}")));
        }
        worst = worst.max(relative_error(ad, fd));
    }
    Ok(worst)
}

/// Per-parameter outcome of [`grad_check_params`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_gradient: f64,
}

/// Checks the gradient of a scalar model loss with respect to trainable
/// parameters, probing `per_tensor` random coordinates of every tensor.
pub fn grad_check_params(
    store: &ParamStore,
    loss: &dyn Fn(&mut Session) -> Result<Var>,
    h: f64,
    per_tensor: usize,
    rng: &mut Rng,
) -> Result<Vec<ParamCheck>> {
    let mut session = Session::new(store);
    let out = loss(&mut session)?;
    let grads = session.backward(out)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut sess = Session::new(s);
        let v = loss(&mut sess)?;
        Ok(sess.graph.value(v).item())
    };
    let mut report = Vec::new();
    let mut probe = store.clone();
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        let n = store.get(id).len();
        let coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.below(n)).collect()
        };
        let analytic = grads.get(id);
        let mut worst = 0.0f64;
        let mut biggest = 0.0f64;
        for i in coords {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let fp = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - h;
            let fm = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let ad = analytic.map_or(0.0, |g| g.data()[i]);
            if !fd.is_finite() || !ad.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient in {}", store.name(id))));
            }
            worst = worst.max(relative_error(ad, fd));
            biggest = biggest.max(ad.abs());
        }
        report.push(ParamCheck {
            name: store.name(id).to_string(),
            max_rel_error: worst,
            max_abs_gradient: biggest,
        });
    }
    Ok(report)
}
