use controlcom::numerics::gradcheck::grad_check;
use controlcom::numerics::kernels::{attention, bilinear_sample, conv2d, group_norm, softmax_rows};
use controlcom::numerics::{Graph, Rng, Tensor, Var};
use controlcom::Result;
use proptest::prelude::*;

/// Direct six-loop cross-correlation.
fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for r in 0..oh {
                for cc in 0..ow {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for kr in 0..k {
                            for kc in 0..k {
                                let y = (r * stride + kr) as isize - pad as isize;
                                let xx = (cc * stride + kc) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((ni * c + ci) * h + y as usize) * wd + xx as usize];
                                let wv = w.data()[((oi * c + ci) * k + kr) * k + kc];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + r) * ow + cc] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}

#[test]
fn conv_identity_kernel() {
    let mut rng = Rng::new(1);
    let x = Tensor::randn(&[1, 1, 3, 3], &mut rng);
    let w = Tensor::ones(&[1, 1, 1, 1]);
    let y = conv2d(&x, &w, Some(&Tensor::zeros(&[1])), 1, 0).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv_full_overlap_center() {
    let x = Tensor::ones(&[1, 1, 3, 3]);
    let w = Tensor::ones(&[1, 1, 3, 3]);
    let y = conv2d(&x, &w, None, 1, 1).unwrap();
    assert_eq!(y.data()[4], 9.0);
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = Rng::new(2);
    let x = Tensor::randn(&[1, 2, 4, 4], &mut rng);
    let w = Tensor::randn(&[3, 2, 3, 3], &mut rng);
    let b = Tensor::randn(&[3], &mut rng);
    for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
        let y = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
        let r = naive_conv(&x, &w, b.data(), stride, pad);
        assert_eq!(y.shape(), r.shape());
        assert!(y.max_abs_diff(&r) < 1e-12);
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let x = Tensor::zeros(&[1, 2, 4, 4]);
    let w = Tensor::zeros(&[3, 3, 3, 3]);
    assert!(matches!(conv2d(&x, &w, None, 1, 1), Err(controlcom::Error::Shape(_))));
}

#[test]
fn attention_uniform_for_zero_logits() {
    let q = Tensor::zeros(&[3, 4]);
    let k = Tensor::zeros(&[5, 4]);
    let v = Tensor::ones(&[5, 2]);
    let (_, w) = attention(&q, &k, &v).unwrap();
    assert!(w.data().iter().all(|&x| (x - 0.2).abs() < 1e-15));
}

#[test]
fn attention_near_one_hot() {
    let q = Tensor::new(&[1, 1], vec![1.0]).unwrap();
    let k = Tensor::new(&[3, 1], vec![0.0, 1e4, 0.0]).unwrap();
    let v = Tensor::zeros(&[3, 1]);
    let (_, w) = attention(&q, &k, &v).unwrap();
    assert!(w.data()[1] >= 1.0 - 1e-6);
}

#[test]
fn attention_empty_keys_is_shape_error() {
    let q = Tensor::zeros(&[2, 4]);
    let k = Tensor::zeros(&[0, 4]);
    let v = Tensor::zeros(&[0, 3]);
    assert!(matches!(attention(&q, &k, &v), Err(controlcom::Error::Shape(_))));
}

#[test]
fn attention_matches_direct_recomputation() {
    let mut rng = Rng::new(3);
    let q = Tensor::randn(&[4, 8], &mut rng);
    let k = Tensor::randn(&[4, 8], &mut rng);
    let v = Tensor::randn(&[4, 3], &mut rng);
    let (out, _) = attention(&q, &k, &v).unwrap();
    for i in 0..4 {
        // Kahan-summed logits and normalizer as a higher-precision reference.
        let logits: Vec<f64> = (0..4)
            .map(|j| {
                let (mut s, mut comp) = (0.0f64, 0.0f64);
                for d in 0..8 {
                    let y = q.data()[i * 8 + d] * k.data()[j * 8 + d] - comp;
                    let t = s + y;
                    comp = (t - s) - y;
                    s = t;
                }
                s / 8f64.sqrt()
            })
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for c in 0..3 {
            let want: f64 = (0..4).map(|j| logits[j].exp() / z * v.data()[j * 3 + c]).sum();
            assert!((out.data()[i * 3 + c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn group_norm_constant_input_is_zero() {
    let x = Tensor::full(&[1, 4, 3, 3], 2.5);
    let y = group_norm(&x, 2, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-5).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn group_norm_moments_and_affine() {
    let mut rng = Rng::new(4);
    let x = Tensor::randn(&[2, 4, 3, 3], &mut rng).map(|v| 3.0 * v + 1.0);
    let y = group_norm(&x, 2, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-5).unwrap();
    for g in y.data().chunks(18) {
        let mean = g.iter().sum::<f64>() / 18.0;
        let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
    let z = group_norm(&x, 2, &Tensor::full(&[4], 2.0), &Tensor::full(&[4], 3.0), 1e-5).unwrap();
    for (a, b) in y.data().iter().zip(z.data()) {
        assert!((2.0 * a + 3.0 - b).abs() < 1e-12);
    }
}

#[test]
fn group_norm_rejects_indivisible_groups() {
    let x = Tensor::zeros(&[1, 3, 2, 2]);
    let r = group_norm(&x, 2, &Tensor::ones(&[3]), &Tensor::zeros(&[3]), 1e-5);
    assert!(matches!(r, Err(controlcom::Error::Shape(_))));
}

#[test]
fn bilinear_center_of_two_by_two() {
    let m = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    assert_eq!(bilinear_sample(&m, 1.0, 1.0).unwrap().item(), 1.5);
}

#[test]
fn bilinear_pixel_centers_and_constants() {
    let mut rng = Rng::new(5);
    let m = Tensor::randn(&[2, 3, 4], &mut rng);
    for r in 0..3 {
        for c in 0..4 {
            let s = bilinear_sample(&m, c as f64 + 0.5, r as f64 + 0.5).unwrap();
            assert_eq!(s.data(), &[m.at3(0, r, c), m.at3(1, r, c)]);
        }
    }
    let k = Tensor::full(&[1, 5, 5], 0.7);
    for (x, y) in [(-3.0, 2.0), (2.2, 2.9), (9.0, 9.0)] {
        assert!((bilinear_sample(&k, x, y).unwrap().item() - 0.7).abs() < 1e-15);
    }
}

/// Four-point formula written out independently of the library's tap logic.
fn closed_form_bilinear(m: &Tensor, x: f64, y: f64) -> f64 {
    let (h, w) = (m.shape()[1] as f64, m.shape()[2] as f64);
    let u = (x - 0.5).max(0.0).min(w - 1.0);
    let v = (y - 0.5).max(0.0).min(h - 1.0);
    let (x0, y0) = (u.floor(), v.floor());
    let (x1, y1) = ((x0 + 1.0).min(w - 1.0), (y0 + 1.0).min(h - 1.0));
    let (a, b) = (u - x0, v - y0);
    let at = |yy: f64, xx: f64| m.at3(0, yy as usize, xx as usize);
    at(y0, x0) * (1.0 - a) * (1.0 - b) + at(y0, x1) * a * (1.0 - b) + at(y1, x0) * (1.0 - a) * b
        + at(y1, x1) * a * b
}

#[test]
fn bilinear_matches_closed_form_on_random_points() {
    let mut rng = Rng::new(6);
    for _ in 0..1000 {
        let (h, w) = (1 + rng.below(8), 1 + rng.below(8));
        let m = Tensor::randn(&[1, h, w], &mut rng);
        let x = rng.range(-1.0, w as f64 + 1.0);
        let y = rng.range(-1.0, h as f64 + 1.0);
        let got = bilinear_sample(&m, x, y).unwrap().item();
        assert!((got - closed_form_bilinear(&m, x, y)).abs() < 1e-12);
    }
}

#[test]
fn grad_check_quadratic() {
    let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
    let f = |g: &mut Graph, x: Var| -> Result<Var> {
        let sq = g.mul(x, x)?;
        g.sum(sq)
    };
    let mut g = Graph::new();
    let xv = g.leaf(x.clone()).unwrap();
    let out = f(&mut g, xv).unwrap();
    assert_eq!(g.backward(out).unwrap().get(xv).unwrap().data(), &[2.0, 4.0, 6.0]);
    assert!(grad_check(&f, &x, 1e-5).unwrap() < 1e-8);
}

#[test]
fn grad_check_softmax_dot() {
    let mut rng = Rng::new(7);
    let x = Tensor::randn(&[1, 6], &mut rng);
    let c = Tensor::randn(&[1, 6], &mut rng);
    let f = move |g: &mut Graph, x: Var| -> Result<Var> {
        let s = g.softmax_rows(x)?;
        let cv = g.constant(c.clone())?;
        let p = g.mul(s, cv)?;
        g.sum(p)
    };
    assert!(grad_check(&f, &x, 1e-5).unwrap() < 1e-6);
}

#[test]
fn grad_check_conv_group_norm() {
    let mut rng = Rng::new(8);
    let x = Tensor::randn(&[1, 2, 5, 5], &mut rng);
    let w = Tensor::randn(&[4, 2, 3, 3], &mut rng);
    let c = Tensor::randn(&[1, 4, 5, 5], &mut rng);
    let f = move |g: &mut Graph, x: Var| -> Result<Var> {
        let wv = g.constant(w.clone())?;
        let y = g.conv2d(x, wv, None, 1, 1)?;
        let n = g.group_norm(y, 2, 1e-5)?;
        let cv = g.constant(c.clone())?;
        let p = g.mul(n, cv)?;
        g.sum(p)
    };
    assert!(grad_check(&f, &x, 1e-5).unwrap() < 1e-5);
}

/// Every differentiable tape op, checked with respect to each input in turn.
#[test]
fn grad_check_every_layer_op() {
    let mut rng = Rng::new(9);
    let probe = Tensor::randn(&[64], &mut rng);
    let readout = move |g: &mut Graph, y: Var| -> Result<Var> {
        let n = g.value(y).len();
        let c = g.constant(Tensor::new(g.shape(y), probe.data()[..n].to_vec())?)?;
        let p = g.mul(y, c)?;
        g.sum(p)
    };
    let bbox = controlcom::BoundingBox::new(0.2, 0.1, 0.8, 0.7).unwrap();
    let w = Tensor::randn(&[2, 2, 3, 3], &mut rng);
    let b = Tensor::randn(&[2], &mut rng);
    let m = Tensor::randn(&[3, 4], &mut rng);
    let patch = Tensor::randn(&[2, 2, 2], &mut rng);
    type Case = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;
    let cases: Vec<(&str, Vec<usize>, Case)> = vec![
        ("conv_input", vec![2, 4, 4], Box::new({
            let (w, b) = (w.clone(), b.clone());
            move |g, x| {
                let (wv, bv) = (g.constant(w.clone())?, g.constant(b.clone())?);
                g.conv2d(x, wv, Some(bv), 2, 1)
            }
        })),
        ("conv_weight", vec![2, 2, 3, 3], Box::new(|g, w| {
            let x = g.constant(Tensor::from_fn(&[2, 4, 4], |i| (i as f64 * 0.37).sin()))?;
            g.conv2d(x, w, None, 1, 1)
        })),
        ("linear", vec![4, 3], Box::new({
            let m = m.clone();
            move |g, x| {
                let mv = g.constant(m.clone())?;
                g.matmul(x, mv, false)
            }
        })),
        ("linear_bt", vec![3, 4], Box::new({
            let m = m.clone();
            move |g, x| {
                let mv = g.constant(m.clone())?;
                g.matmul(x, mv, true)
            }
        })),
        ("layer_norm", vec![3, 5], Box::new(|g, x| g.layer_norm(x, 1e-5))),
        ("group_norm", vec![4, 2, 3], Box::new(|g, x| g.group_norm(x, 2, 1e-5))),
        ("attention", vec![3, 4], Box::new(|g, x| {
            let t = g.transpose(x)?;
            let l = g.matmul(x, x, true)?;
            let l = g.scale(l, 0.5)?;
            let a = g.softmax_rows(l)?;
            let y = g.matmul(a, x, false)?;
            let _ = t;
            g.gelu(y)
        })),
        ("silu_channel_ops", vec![2, 2, 2], Box::new(|g, x| {
            let s = g.silu(x)?;
            let v = g.constant(Tensor::from_vec(vec![0.3, -1.2]))?;
            let a = g.mul_channel(s, v)?;
            g.add_channel(a, v)
        })),
        ("row_ops", vec![3, 2], Box::new(|g, x| {
            let v = g.constant(Tensor::from_vec(vec![0.3, -1.2]))?;
            let a = g.mul_row(x, v)?;
            g.add_row(a, v)
        })),
        ("roi_align", vec![2, 5, 5], Box::new(move |g, x| g.roi_align(x, &bbox, 3))),
        ("box_add_map", vec![2, 5, 5], Box::new({
            let patch = patch.clone();
            move |g, x| {
                let p = g.constant(patch.clone())?;
                g.box_add(x, p, &bbox)
            }
        })),
        ("box_add_patch", vec![2, 2, 2], Box::new(move |g, p| {
            let x = g.constant(Tensor::zeros(&[2, 5, 5]))?;
            g.box_add(x, p, &bbox)
        })),
        ("upsample_concat_slice", vec![2, 2, 2], Box::new(|g, x| {
            let u = g.upsample2(x)?;
            let r = g.reshape(u, &[2, 16])?;
            let c = g.concat(&[r, r])?;
            g.slice_rows(c, 1, 3)
        })),
    ];
    for (name, shape, f) in cases {
        let x = Tensor::randn(&shape, &mut rng);
        let full = |g: &mut Graph, x: Var| -> Result<Var> {
            let y = f(g, x)?;
            readout(g, y)
        };
        let err = grad_check(&full, &x, 1e-5).unwrap();
        assert!(err < 1e-5, "{name}: {err}");
    }
}

#[test]
fn grad_check_mse_and_mean() {
    let mut rng = Rng::new(10);
    let t = Tensor::randn(&[2, 3], &mut rng);
    let x = Tensor::randn(&[2, 3], &mut rng);
    let f = move |g: &mut Graph, x: Var| -> Result<Var> {
        let tv = g.constant(t.clone())?;
        let a = g.mse(x, tv)?;
        let m = g.mean(x)?;
        g.add(a, m)
    };
    assert!(grad_check(&f, &x, 1e-5).unwrap() < 1e-8);
}

#[test]
fn non_finite_output_is_numerical_error() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![1e300])).unwrap();
    assert!(matches!(g.mul(x, x), Err(controlcom::Error::Numerical(_))));
}

#[test]
fn ops_are_bitwise_deterministic() {
    let run = || {
        let mut rng = Rng::new(11);
        let x = Tensor::randn(&[1, 3, 6, 6], &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], &mut rng);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        let y = group_norm(&y, 2, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-5).unwrap();
        y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), n in 1usize..6, m in 1usize..9, scale in 0.1f64..50.0) {
        let mut rng = Rng::new(seed);
        let x = Tensor::randn(&[n, m], &mut rng).scale(scale);
        let s = softmax_rows(&x).unwrap();
        for row in s.data().chunks(m) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_weight_rows_sum_to_one(seed in any::<u64>(), n in 1usize..6, m in 1usize..9, d in 1usize..8) {
        let mut rng = Rng::new(seed);
        let q = Tensor::randn(&[n, d], &mut rng).scale(3.0);
        let k = Tensor::randn(&[m, d], &mut rng).scale(3.0);
        let v = Tensor::randn(&[m, 2], &mut rng);
        let (_, w) = attention(&q, &k, &v).unwrap();
        for row in w.data().chunks(m) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_output_extent_formula(h in 3usize..9, w in 3usize..9, k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..3) {
        let pad = k / 2;
        let x = Tensor::ones(&[1, 1, h, w]);
        let wt = Tensor::ones(&[2, 1, k, k]);
        let y = conv2d(&x, &wt, None, stride, pad).unwrap();
        prop_assert_eq!(y.shape(), &[1, 2, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1][..]);
    }
}
