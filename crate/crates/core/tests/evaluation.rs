mod common;

use controlcom::data::{fill_box, generate_synthetic_source, JitterParams};
use controlcom::evaluation::{
    average_rank, bt_fit, format_rank_rows, masked_background_ssim, masked_fg_similarity, ssim, BtScores,
    GlobalEmbedder, ItemScore, MetricReport, PairwiseTable, REPORT_SCHEMA, SCORE_FLOOR,
};
use controlcom::model::{Model, ModelConfig};
use controlcom::numerics::{Rng, Tensor};
use controlcom::{BoundingBox, Error};
use proptest::prelude::*;

use common::random_box;

/// Straightforward SSIM: a normalized 2-D Gaussian kernel and centered
/// second moments per window.
fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let (c, h, w) = a.dims3().unwrap();
    let k = 11;
    let mut kern = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            kern[i * k + j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let z: f64 = kern.iter().sum();
    kern.iter_mut().for_each(|v| *v /= z);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut vals = Vec::new();
    for ch in 0..c {
        for r in 0..=h - k {
            for col in 0..=w - k {
                let px = |t: &Tensor, i: usize, j: usize| t.at3(ch, r + i, col + j);
                let mut mx = 0.0;
                let mut my = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        mx += kern[i * k + j] * px(a, i, j);
                        my += kern[i * k + j] * px(b, i, j);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let (dx, dy) = (px(a, i, j) - mx, px(b, i, j) - my);
                        vx += kern[i * k + j] * dx * dx;
                        vy += kern[i * k + j] * dy * dy;
                        cov += kern[i * k + j] * dx * dy;
                    }
                }
                vals.push((2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)));
            }
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("m{i}")).collect()
}

fn tiny() -> Model {
    Model::new(ModelConfig::tiny()).unwrap()
}

/// Embeds an image as its per-channel sums, so a pure red object and a pure
/// green one are exactly orthogonal.
struct ChannelSums;

impl GlobalEmbedder for ChannelSums {
    fn input_size(&self) -> usize {
        16
    }

    fn embed_global(&self, image: &Tensor) -> controlcom::Result<Vec<f64>> {
        let (c, h, w) = image.dims3()?;
        Ok((0..c).map(|ch| image.data()[ch * h * w..(ch + 1) * h * w].iter().sum()).collect())
    }
}

/// A synthetic source image with its object, and the box crop as the
/// input foreground.
struct Case {
    composite: Tensor,
    foreground: Tensor,
    bbox: BoundingBox,
    mask: Tensor,
}

fn case(seed: u64) -> Case {
    let rec = generate_synthetic_source(&mut Rng::substream(seed, "eval-case", 0), 32, 32);
    let span = rec.bbox.pixel_span(32, 32);
    let foreground = controlcom::data::crop_span(&rec.image, span).unwrap();
    Case { composite: rec.image, foreground, bbox: rec.bbox, mask: rec.mask }
}

/// Overwrites every pixel where `keep(r, c)` is false with fresh noise.
fn scramble(image: &Tensor, rng: &mut Rng, keep: impl Fn(usize, usize) -> bool) -> Tensor {
    let (c, h, w) = image.dims3().unwrap();
    let mut out = image.clone();
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                if !keep(r, col) {
                    out.set3(ch, r, col, rng.range(-3.0, 3.0));
                }
            }
        }
    }
    out
}

#[test]
fn ssim_of_identical_images_is_one() {
    let a = Tensor::uniform(&[3, 24, 24], 0.0, 1.0, &mut Rng::new(1));
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let bbox = BoundingBox::new(0.2, 0.3, 0.6, 0.7).unwrap();
    assert!((masked_background_ssim(&a, &a, &bbox).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn edits_inside_the_box_do_not_reach_masked_ssim() {
    let mut rng = Rng::new(2);
    let bg = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
    let bbox = BoundingBox::new(0.25, 0.25, 0.75, 0.6).unwrap();
    let span = bbox.pixel_span(32, 32);
    let comp = scramble(&bg, &mut rng, |r, c| !span.contains(r, c));
    assert_ne!(comp, bg);
    assert!((masked_background_ssim(&bg, &comp, &bbox).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn masked_ssim_matches_independent_implementation() {
    let mut rng = Rng::new(3);
    for _ in 0..5 {
        let bg = Tensor::uniform(&[3, 32, 32], 0.0, 0.9, &mut rng);
        let bbox = random_box(&mut rng, 0.2);
        let span = bbox.pixel_span(32, 32);
        let comp = Tensor::from_fn(bg.shape(), |i| {
            let (r, c) = ((i / 32) % 32, i % 32);
            if span.contains(r, c) { bg.data()[i] } else { bg.data()[i] + 0.1 }
        });
        let got = masked_background_ssim(&bg, &comp, &bbox).unwrap();
        let want = ssim_oracle(&fill_box(&bg, &bbox, 0.0).unwrap(), &fill_box(&comp, &bbox, 0.0).unwrap());
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        assert!(got < 1.0);
    }
}

#[test]
fn ssim_rejects_mismatched_extents() {
    let a = Tensor::zeros(&[3, 16, 16]);
    let b = Tensor::zeros(&[3, 16, 20]);
    assert!(matches!(ssim(&a, &b), Err(Error::Shape(_))));
    assert!(matches!(masked_background_ssim(&a, &b, &BoundingBox::full()), Err(Error::Shape(_))));
}

#[test]
fn foreground_similarity_of_an_unchanged_object_is_one() {
    let m = tiny();
    for seed in 0..5 {
        let c = case(seed);
        let s = masked_fg_similarity(&c.composite, &c.foreground, &c.bbox, &c.mask, &m).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "seed {seed}: {s}");
    }
}

#[test]
fn orthogonal_stub_embeddings_score_zero() {
    let n = 32;
    let bbox = BoundingBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
    let mask = bbox.mask(n, n);
    let composite = Tensor::from_fn(&[3, n, n], |i| if i / (n * n) == 0 { 1.0 } else { 0.0 });
    let foreground = Tensor::from_fn(&[3, 16, 16], |i| if i / 256 == 1 { 1.0 } else { 0.0 });
    let s = masked_fg_similarity(&composite, &foreground, &bbox, &mask, &ChannelSums).unwrap();
    assert_eq!(s, 0.0);
}

#[test]
fn self_similarity_beats_strong_jitter() {
    let m = tiny();
    let mut strictly = 0;
    for seed in 0..100 {
        let c = case(seed);
        let mut rng = Rng::substream(seed, "eval-jitter", 0);
        let jitter = JitterParams { brightness: 0.5, contrast: 1.6, saturation: 0.2, hue: rng.range(0.2, 0.4), ..JitterParams::identity() };
        let jittered = jitter.apply(&c.composite);
        let same = masked_fg_similarity(&c.composite, &c.foreground, &c.bbox, &c.mask, &m).unwrap();
        let moved = masked_fg_similarity(&jittered, &c.foreground, &c.bbox, &c.mask, &m).unwrap();
        assert!(same >= moved, "seed {seed}: {same} < {moved}");
        strictly += (same > moved) as usize;
    }
    assert!(strictly > 90, "{strictly}");
}

#[test]
fn foreground_similarity_ignores_non_object_pixels() {
    let m = tiny();
    let mut rng = Rng::new(4);
    for seed in 0..200 {
        let c = case(seed);
        let base = masked_fg_similarity(&c.composite, &c.foreground, &c.bbox, &c.mask, &m).unwrap();
        let mask = c.mask.clone();
        let edited = scramble(&c.composite, &mut rng, |r, col| mask.at3(0, r, col) > 0.0);
        let again = masked_fg_similarity(&edited, &c.foreground, &c.bbox, &c.mask, &m).unwrap();
        assert_eq!(base.to_bits(), again.to_bits(), "seed {seed}");
    }
}

#[test]
fn empty_object_mask_is_a_geometry_error() {
    let m = tiny();
    let c = case(5);
    let empty = Tensor::zeros(c.mask.shape());
    let r = masked_fg_similarity(&c.composite, &c.foreground, &c.bbox, &empty, &m);
    assert!(matches!(r, Err(Error::Geometry(_))));
}

#[test]
fn bradley_terry_two_player_closed_forms() {
    let tie = PairwiseTable::new(names(2), vec![vec![0.0, 50.0], vec![50.0, 0.0]]).unwrap();
    let s = bt_fit(&tie, 1e-10, 10_000).unwrap();
    assert!(s.converged);
    assert!(s.scores.iter().all(|v| v.abs() < 1e-12));

    let t = PairwiseTable::new(names(2), vec![vec![0.0, 75.0], vec![25.0, 0.0]]).unwrap();
    let s = bt_fit(&t, 1e-10, 10_000).unwrap();
    assert!(s.converged);
    assert!((s.scores[0] - s.scores[1] - 3f64.ln()).abs() < 1e-6);
    assert!(s.scores.iter().sum::<f64>().abs() < 1e-9);
}

/// Simulates `n` comparisons over uniformly chosen pairs.
fn simulate(strengths: &[f64], n: usize, seed: u64) -> PairwiseTable {
    let m = strengths.len();
    let mut rng = Rng::new(seed);
    let mut wins = vec![vec![0.0; m]; m];
    for _ in 0..n {
        let i = rng.below(m);
        let j = (i + 1 + rng.below(m - 1)) % m;
        let p = strengths[i] / (strengths[i] + strengths[j]);
        if rng.uniform() < p {
            wins[i][j] += 1.0;
        } else {
            wins[j][i] += 1.0;
        }
    }
    PairwiseTable::new(names(m), wins).unwrap()
}

#[test]
fn bradley_terry_recovers_planted_strengths() {
    let planted = [1.0, 0.5, 0.25];
    for seed in 0..5 {
        let s = bt_fit(&simulate(&planted, 10_000, seed), 1e-10, 10_000).unwrap();
        assert!(s.converged);
        assert!(s.scores[0] > s.scores[1] && s.scores[1] > s.scores[2]);
        for i in 0..3 {
            for j in i + 1..3 {
                let want = (planted[i] / planted[j]).ln();
                let got = s.scores[i] - s.scores[j];
                assert!((got - want).abs() < 0.1, "seed {seed} ({i},{j}): {got} vs {want}");
            }
        }
    }
}

#[test]
fn bradley_terry_is_invariant_to_scaling_counts() {
    let t = simulate(&[1.0, 0.7, 0.3, 0.2], 2_000, 9);
    let base = bt_fit(&t, 1e-12, 10_000).unwrap();
    for k in [2.0, 3.0, 10.0] {
        let scaled = PairwiseTable::new(t.methods.clone(), t.wins.iter().map(|r| r.iter().map(|v| v * k).collect()).collect()).unwrap();
        let s = bt_fit(&scaled, 1e-12, 10_000).unwrap();
        for (a, b) in base.scores.iter().zip(&s.scores) {
            assert!((a - b).abs() < 1e-9, "k={k}: {a} vs {b}");
        }
    }
}

#[test]
fn bradley_terry_error_and_clamp_paths() {
    let split = PairwiseTable::new(
        names(4),
        vec![vec![0.0, 2.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 4.0], vec![0.0, 0.0, 3.0, 0.0]],
    )
    .unwrap();
    assert!(matches!(bt_fit(&split, 1e-10, 100), Err(Error::RankDeficient(_))));

    let t = PairwiseTable::new(names(3), vec![vec![0.0, 5.0, 4.0], vec![3.0, 0.0, 6.0], vec![0.0, 0.0, 0.0]]).unwrap();
    let s = bt_fit(&t, 1e-10, 10_000).unwrap();
    assert_eq!(s.clamped, vec![false, false, true]);
    assert!(s.scores.iter().all(|v| v.is_finite()));
    assert!(s.scores[2] < s.scores[1] && s.scores[2] < s.scores[0]);
    assert!(s.scores.iter().sum::<f64>().abs() < 1e-9);
    assert!(SCORE_FLOOR < -18.0);

    assert!(matches!(PairwiseTable::new(names(2), vec![vec![1.0, 0.0], vec![0.0, 0.0]]), Err(Error::Validation(_))));
    assert!(matches!(PairwiseTable::new(names(2), vec![vec![0.0, -1.0], vec![0.0, 0.0]]), Err(Error::Validation(_))));
    assert!(matches!(PairwiseTable::new(names(2), vec![vec![0.0, 1.0]]), Err(Error::Validation(_))));
}

#[test]
fn pairwise_table_from_csv() {
    let csv = "method_a,method_b,wins_a,wins_b\nA,B,30,10\nB,C,12,8\nA,B,5,5\nC,A,2,18\n";
    let t = PairwiseTable::from_csv(csv.as_bytes()).unwrap();
    assert_eq!(t.methods, vec!["A", "B", "C"]);
    assert_eq!(t.wins, vec![vec![0.0, 35.0, 18.0], vec![15.0, 0.0, 12.0], vec![2.0, 8.0, 0.0]]);
    assert_eq!(t.comparisons(0, 1), 50.0);
    assert_eq!(t.comparisons(1, 0), 50.0);
    let s = bt_fit(&t, 1e-10, 10_000).unwrap();
    assert!(s.scores[0] > s.scores[1] && s.scores[1] > s.scores[2]);

    assert!(PairwiseTable::from_csv("method_a,method_b,wins_a,wins_b\nA,A,1,1\n".as_bytes()).is_err());
    assert!(PairwiseTable::from_csv("method_a,method_b,wins_a,wins_b\nA,B,x,1\n".as_bytes()).is_err());
}

#[test]
fn average_rank_examples() {
    assert_eq!(average_rank(&[vec![1, 2, 3]]).unwrap(), vec![1.0, 2.0, 3.0]);
    assert_eq!(average_rank(&[vec![1, 2], vec![2, 1]]).unwrap(), vec![1.5, 1.5]);
    assert!(matches!(average_rank(&[vec![0, 1]]), Err(Error::Validation(_))));
    assert!(matches!(average_rank(&[vec![1, 3]]), Err(Error::Validation(_))));
    assert!(matches!(average_rank(&[]), Err(Error::Validation(_))));
}

#[test]
fn score_tables_render_like_published_rows() {
    let s = BtScores {
        methods: vec!["Ours (Blend)".into(), "Other".into()],
        scores: vec![1.2006, -1.2006],
        iterations: 3,
        converged: true,
        clamped: vec![false, false],
    };
    assert_eq!(s.format_rows(), "Ours (Blend) 1.201\nOther -1.201\n");
    let rows = format_rank_rows(&["Ours (Comp)".into()], &[1.7333], &[1.14]);
    assert_eq!(rows, "Ours (Comp) 1.73 1.14\n");
}

#[test]
fn metric_report_aggregates_and_serializes() {
    let items = vec![ItemScore { id: "a".into(), score: 1.0 }, ItemScore { id: "b".into(), score: 0.5 }];
    let r = MetricReport::new("masked_background_ssim", items);
    assert_eq!(r.aggregate, 0.75);
    assert_eq!(MetricReport::new("x", vec![]).aggregate, 0.0);
    let json: serde_json::Value = serde_json::to_value(&r).unwrap();
    let keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
    assert_eq!(keys, vec!["aggregate", "items", "metadata", "metric"]);
    let back: MetricReport = serde_json::from_value(json).unwrap();
    assert_eq!(back, r);
    let schema: serde_json::Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    assert_eq!(schema["required"], serde_json::json!(["metric", "items", "aggregate"]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn masked_ssim_is_bitwise_blind_to_box_interior(seed in 0u64..10_000, x0 in 0.0f64..0.5, y0 in 0.0f64..0.5, w in 0.2f64..0.5, h in 0.2f64..0.5) {
        let mut rng = Rng::new(seed);
        let bg = Tensor::uniform(&[3, 24, 24], 0.0, 1.0, &mut rng);
        let comp = Tensor::uniform(&[3, 24, 24], 0.0, 1.0, &mut rng);
        let bbox = BoundingBox::new(x0, y0, x0 + w, y0 + h).unwrap();
        let span = bbox.pixel_span(24, 24);
        let base = masked_background_ssim(&bg, &comp, &bbox).unwrap();
        let comp2 = scramble(&comp, &mut rng, |r, c| !span.contains(r, c));
        let bg2 = scramble(&bg, &mut rng, |r, c| !span.contains(r, c));
        prop_assert_eq!(base.to_bits(), masked_background_ssim(&bg2, &comp2, &bbox).unwrap().to_bits());
        prop_assert!(base <= 1.0 + 1e-12);
    }

    #[test]
    fn bradley_terry_scores_are_centered(w in proptest::collection::vec(1.0f64..50.0, 6)) {
        let wins = vec![vec![0.0, w[0], w[1]], vec![w[2], 0.0, w[3]], vec![w[4], w[5], 0.0]];
        let s = bt_fit(&PairwiseTable::new(names(3), wins).unwrap(), 1e-10, 10_000).unwrap();
        prop_assert!(s.converged);
        prop_assert!(s.scores.iter().sum::<f64>().abs() < 1e-9);
    }
}
