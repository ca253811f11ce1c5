//! Reference implementations shared by the integration tests. They are
//! written as plain loops, independent of the crate's kernels.
#![allow(dead_code)]

use controlcom::generator::{Indicator, LocalEnhancement};
use controlcom::numerics::{ParamStore, Rng, Tensor};
use controlcom::BoundingBox;

/// Adds `N(0, scale²)` noise to every parameter, so zero-initialized
/// layers stop masking the paths behind them.
pub fn perturb_params(store: &mut ParamStore, scale: f64, rng: &mut Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        for v in t.data_mut() {
            *v += scale * rng.normal();
        }
    }
}

/// Bilinear read of channel `c` at continuous coordinates (pixel centers at
/// `i + 0.5`, border clamp), from the textbook formula.
pub fn bilinear(map: &Tensor, c: usize, x: f64, y: f64) -> f64 {
    let h = map.shape()[1];
    let w = map.shape()[2];
    let u = (x - 0.5).max(0.0).min((w - 1) as f64);
    let v = (y - 0.5).max(0.0).min((h - 1) as f64);
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (a, b) = (u - x0 as f64, v - y0 as f64);
    let f = |yy: usize, xx: usize| map.at3(c, yy, xx);
    f(y0, x0) * (1.0 - a) * (1.0 - b) + f(y0, x1) * a * (1.0 - b) + f(y1, x0) * (1.0 - a) * b + f(y1, x1) * a * b
}

/// One bilinear sample at the center of each of the `p × p` bins.
pub fn roi_oracle(map: &Tensor, bbox: &BoundingBox, p: usize) -> Tensor {
    let (c, h, w) = map.dims3().unwrap();
    let bw = (bbox.x1 - bbox.x0) * w as f64 / p as f64;
    let bh = (bbox.y1 - bbox.y0) * h as f64 / p as f64;
    Tensor::from_fn(&[c, p, p], |i| {
        let (ch, r, col) = (i / (p * p), (i / p) % p, i % p);
        let x = bbox.x0 * w as f64 + (col as f64 + 0.5) * bw;
        let y = bbox.y0 * h as f64 + (r as f64 + 0.5) * bh;
        bilinear(map, ch, x, y)
    })
}

/// Zero-padded stride-1 "same" cross-correlation of `[c,h,w]` with
/// `[o,c,k,k]`.
pub fn conv_same(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (c, h, wd) = x.dims3().unwrap();
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    Tensor::from_fn(&[o, h, wd], |i| {
        let (oi, r, cc) = (i / (h * wd), (i / wd) % h, i % wd);
        let mut acc = b.data()[oi];
        for ci in 0..c {
            for kr in 0..k {
                for kc in 0..k {
                    let y = r as isize + kr as isize - pad;
                    let xx = cc as isize + kc as isize - pad;
                    if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                        continue;
                    }
                    acc += x.at3(ci, y as usize, xx as usize) * w.data()[((oi * c + ci) * k + kr) * k + kc];
                }
            }
        }
        acc
    })
}

/// Parameter-free group normalization of `[c,h,w]` (population variance).
pub fn group_norm_plain(x: &Tensor, groups: usize, eps: f64) -> Tensor {
    let (c, h, w) = x.dims3().unwrap();
    let per = c / groups;
    let mut out = x.clone();
    for g in 0..groups {
        let vals: Vec<f64> = (g * per..(g + 1) * per)
            .flat_map(|ch| (0..h * w).map(move |i| (ch, i)))
            .map(|(ch, i)| x.data()[ch * h * w + i])
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        for ch in g * per..(g + 1) * per {
            for i in 0..h * w {
                let v = &mut out.data_mut()[ch * h * w + i];
                *v = (*v - mean) / (var + eps).sqrt();
            }
        }
    }
    out
}

/// `a · bᵀ` for row-major `[n,k]` and `[m,k]`.
pub fn matmul_t(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = a.dims2().unwrap();
    let (m, _) = b.dims2().unwrap();
    Tensor::from_fn(&[n, m], |i| {
        let (r, c) = (i / m, i % m);
        (0..k).map(|j| a.data()[r * k + j] * b.data()[c * k + j]).sum()
    })
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (n, m) = a.dims2().unwrap();
    Tensor::from_fn(&[m, n], |i| a.data()[(i % n) * m + i / n])
}

pub fn softmax(a: &Tensor) -> Tensor {
    let (n, m) = a.dims2().unwrap();
    let mut out = a.clone();
    for r in 0..n {
        let row = &mut out.data_mut()[r * m..(r + 1) * m];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        row.iter_mut().for_each(|v| *v = (*v - mx).exp() / z);
    }
    out
}

fn linear(store: &ParamStore, x: &Tensor, l: &controlcom::numerics::nn::Linear) -> Tensor {
    let mut y = matmul_t(x, store.get(l.weight));
    if let Some(b) = l.bias {
        let (n, m) = y.dims2().unwrap();
        for r in 0..n {
            for c in 0..m {
                y.data_mut()[r * m + c] += store.get(b).data()[c];
            }
        }
    }
    y
}

/// `F̃ ↦ norm(F̃) ⊙ conv_γ(Ẽ) + conv_β(Ẽ)` with `Ẽ = reshape((A·E)ᵀ)`.
pub fn modulation_oracle(
    store: &ParamStore,
    fm: &controlcom::generator::FeatureModulation,
    synth: &Tensor,
    attn: &Tensor,
    local: &Tensor,
) -> Tensor {
    let (_, p, _) = synth.dims3().unwrap();
    let (_, d) = local.dims2().unwrap();
    let aligned = transpose(&matmul_t(attn, &transpose(local))).reshape(&[d, p, p]).unwrap();
    let conv = |c: &controlcom::numerics::nn::Conv2d| {
        conv_same(&aligned, store.get(c.weight), store.get(c.bias.unwrap()))
    };
    let (gamma, beta) = (conv(&fm.conv_gamma), conv(&fm.conv_beta));
    let normed = group_norm_plain(synth, fm.groups, 1e-5);
    Tensor::from_fn(synth.shape(), |i| normed.data()[i] * gamma.data()[i] + beta.data()[i])
}

/// Step-by-step recomputation of the local enhancement module; returns the
/// enhanced map and the attention matrix.
pub fn local_enhancement_oracle(
    store: &ParamStore,
    le: &LocalEnhancement,
    feat: &Tensor,
    local: &Tensor,
    indicator: Indicator,
    bbox: &BoundingBox,
) -> (Tensor, Tensor) {
    let (c, h, w) = feat.dims3().unwrap();
    let p = le.p;
    let region = roi_oracle(feat, bbox, p);
    let bits = indicator.bits();
    let stacked = Tensor::from_fn(&[c + 2, p, p], |i| {
        let ch = i / (p * p);
        if ch < c { region.data()[i] } else { bits[ch - c] }
    });
    let fused = conv_same(&stacked, store.get(le.fuse.weight), store.get(le.fuse.bias.unwrap()));
    let tokens = transpose(&fused.reshape(&[c, p * p]).unwrap());
    let q = linear(store, &tokens, &le.q);
    let k = linear(store, local, &le.k);
    let v = linear(store, local, &le.v);
    let logits = matmul_t(&q, &k).scale(1.0 / (c as f64).sqrt());
    let attn = softmax(&logits);
    let mixed = matmul_t(&attn, &transpose(&v));
    let synth = linear(store, &mixed, &le.out);
    let mut synth = transpose(&synth).reshape(&[c, p, p]).unwrap();
    if let Some(fm) = &le.modulation {
        synth = modulation_oracle(store, fm, &synth, &attn, local);
    }
    // Bilinear resize of the p×p patch onto the box pixels, added in place.
    let span = bbox.pixel_span(h, w);
    let (bw, bh) = ((bbox.x1 - bbox.x0) * w as f64 / p as f64, (bbox.y1 - bbox.y0) * h as f64 / p as f64);
    let mut out = feat.clone();
    for ch in 0..c {
        for r in span.r0..span.r1 {
            for col in span.c0..span.c1 {
                let px = (col as f64 + 0.5 - bbox.x0 * w as f64) / bw;
                let py = (r as f64 + 0.5 - bbox.y0 * h as f64) / bh;
                let add = bilinear(&synth, ch, px, py);
                out.set3(ch, r, col, out.at3(ch, r, col) + add);
            }
        }
    }
    (out, attn)
}

/// A random box with both sides at least `min_side`.
pub fn random_box(rng: &mut Rng, min_side: f64) -> BoundingBox {
    let w = rng.range(min_side, 1.0);
    let h = rng.range(min_side, 1.0);
    let x0 = rng.range(0.0, 1.0 - w);
    let y0 = rng.range(0.0, 1.0 - h);
    BoundingBox::new(x0, y0, (x0 + w).min(1.0), (y0 + h).min(1.0)).unwrap()
}

/// Eight training tuples from two synthetic sources: two per indicator.
pub fn eight_tuples(seed: u64) -> Vec<controlcom::data::TrainingTuple> {
    let cfg = controlcom::data::DataConfig::tiny();
    controlcom::data::generate_tuples(&cfg, 2, seed)
        .unwrap()
        .into_iter()
        .flat_map(|s| s.tuples)
        .collect()
}
