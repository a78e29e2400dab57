use gmflow::data::synth::{synth_sample, SynthConfig};
use gmflow::model::{ForwardOptions, ModelConfig, ModelWeights};
use gmflow::refine::{
    convex_upsample, init_upsampler, propagate_flow, refine, upsample_flow_2x, warp, PropagationConfig, RefineConfig,
    UPSAMPLER_PREFIX,
};
use gmflow::selftest::{model_grad_check, randomized_weights, roll_features, sharp_features};
use gmflow::{FeatureMap, FlowField, ParamStore};
use gmflow_tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn feat(t: Tensor<f64>) -> FeatureMap<f64> {
    FeatureMap::new(t, 4).unwrap()
}

fn flow(t: Tensor<f64>) -> FlowField<f64> {
    FlowField::new(t, 4).unwrap()
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn constant_flow_survives_propagation() {
    let f = feat(rand_t(&[5, 6, 8], -2.0, 2.0, 1));
    let v = FlowField::constant(5, 6, 2.5, -1.0, 4);
    for cfg in [PropagationConfig::Global, PropagationConfig::Local(3)] {
        let out = propagate_flow(&f, &v, cfg).unwrap();
        assert!(max_diff(&out.data, &v.data) < 1e-12);
    }
}

#[test]
fn isolated_sharp_pixel_keeps_its_flow() {
    // Pixel 0 is orthogonal to all others and has norm 100.
    let (h, w, d) = (3, 3, 4);
    let f = Tensor::from_fn(&[h, w, d], |i| match (i[0] * w + i[1], i[2]) {
        (0, 0) => 100.0,
        (0, _) => 0.0,
        (_, 1) => 1.0,
        _ => 0.0,
    });
    let v = flow(rand_t(&[h, w, 2], -5.0, 5.0, 2));
    let out = propagate_flow(&feat(f), &v, PropagationConfig::Global).unwrap();
    assert!((out.at(0, 0).0 - v.at(0, 0).0).abs() < 1e-9);
    assert!((out.at(0, 0).1 - v.at(0, 0).1).abs() < 1e-9);
}

/// Direct evaluation of `softmax(F Fᵀ / √D) V` for one pixel.
fn propagated_at(f: &Tensor<f64>, v: &Tensor<f64>, p: usize) -> (f64, f64) {
    let d = f.shape()[2];
    let n = f.len() / d;
    let fd = f.data();
    let s: Vec<f64> = (0..n)
        .map(|q| (0..d).map(|k| fd[p * d + k] * fd[q * d + k]).sum::<f64>() / (d as f64).sqrt())
        .collect();
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let u = (0..n).map(|q| e[q] / z * v.data()[2 * q]).sum();
    let vv = (0..n).map(|q| e[q] / z * v.data()[2 * q + 1]).sum();
    (u, vv)
}

#[test]
fn corrupted_pixel_is_pulled_toward_its_cluster() {
    let (h, w) = (4, 6);
    // Cluster A: left half, direction e0; cluster B: right half, direction e1.
    let f = Tensor::from_fn(&[h, w, 2], |i| if (i[1] < w / 2) == (i[2] == 0) { 2.0 } else { 0.0 });
    let good = |x: usize| if x < w / 2 { (1.0, 2.0) } else { (-4.0, 0.5) };
    let bad = (2, 1);
    let v = Tensor::from_fn(&[h, w, 2], |i| {
        if (i[0], i[1]) == bad {
            [8.0, -6.0][i[2]]
        } else {
            let g = good(i[1]);
            [g.0, g.1][i[2]]
        }
    });
    let out = propagate_flow(&feat(f.clone()), &flow(v.clone()), PropagationConfig::Global).unwrap();
    let p = bad.0 * w + bad.1;
    let expect = propagated_at(&f, &v, p);
    let got = out.at(bad.0, bad.1);
    assert!((got.0 - expect.0).abs() < 1e-9 && (got.1 - expect.1).abs() < 1e-9);
    let err = |(u, v): (f64, f64)| ((u - 1.0).powi(2) + (v - 2.0).powi(2)).sqrt();
    assert!(err(got) < err((8.0, -6.0)));
}

#[test]
fn even_or_tiny_propagation_windows_are_rejected() {
    let f = feat(rand_t(&[4, 4, 4], -1.0, 1.0, 3));
    let v = FlowField::zeros(4, 4, 4);
    assert!(propagate_flow(&f, &v, PropagationConfig::Local(4)).is_err());
    assert!(propagate_flow(&f, &v, PropagationConfig::Local(1)).is_err());
}

#[test]
fn zero_flow_warp_is_the_identity() {
    let f = feat(rand_t(&[5, 7, 3], -1.0, 1.0, 4));
    let out = warp(&f, &FlowField::zeros(5, 7, 4)).unwrap();
    assert_eq!(out.data, f.data);
}

#[test]
fn unit_shift_warp_reads_the_right_neighbor() {
    let (h, w, d) = (3, 5, 2);
    let f = feat(rand_t(&[h, w, d], -1.0, 1.0, 5));
    let out = warp(&f, &FlowField::constant(h, w, 1.0, 0.0, 4)).unwrap();
    for y in 0..h {
        for x in 0..w {
            for c in 0..d {
                let expect = if x + 1 < w { f.data.at(&[y, x + 1, c]) } else { 0.0 };
                assert!((out.data.at(&[y, x, c]) - expect).abs() < 1e-12);
            }
        }
    }
}

/// Bilinear sample of one channel at `(x, y)`: zero strictly outside the
/// pixel-center box, ordinary interpolation inside it.
fn sample(f: &Tensor<f64>, x: f64, y: f64, c: usize) -> f64 {
    let (h, w) = (f.shape()[0], f.shape()[1]);
    if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
        return 0.0;
    }
    let (x0, y0) = (
        (x.floor() as usize).min(w.saturating_sub(2)),
        (y.floor() as usize).min(h.saturating_sub(2)),
    );
    let (ax, ay) = (x - x0 as f64, y - y0 as f64);
    let at = |yy: usize, xx: usize| f.at(&[yy.min(h - 1), xx.min(w - 1), c]);
    (1.0 - ay) * ((1.0 - ax) * at(y0, x0) + ax * at(y0, x0 + 1))
        + ay * ((1.0 - ax) * at(y0 + 1, x0) + ax * at(y0 + 1, x0 + 1))
}

#[test]
fn warp_matches_scalar_sampling_loop() {
    let (h, w, d) = (6, 7, 3);
    let f = feat(rand_t(&[h, w, d], -1.0, 1.0, 6));
    let v = flow(rand_t(&[h, w, 2], -3.0, 3.0, 7));
    let out = warp(&f, &v).unwrap();
    for y in 0..h {
        for x in 0..w {
            let (u, vv) = v.at(y, x);
            for c in 0..d {
                let e = sample(&f.data, x as f64 + u, y as f64 + vv, c);
                assert!((out.data.at(&[y, x, c]) - e).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn upsampling_constant_and_zero_fields() {
    let up = upsample_flow_2x(&FlowField::<f64>::constant(3, 4, 3.0, 1.0, 8)).unwrap();
    assert_eq!(up.data.shape(), &[6, 8, 2]);
    assert_eq!(up.scale, 4);
    assert!(up.data.data().chunks(2).all(|c| c == [6.0, 2.0]));
    let up = upsample_flow_2x(&FlowField::<f64>::zeros(3, 4, 8)).unwrap();
    assert!(up.data.data().iter().all(|&v| v == 0.0));
}

#[test]
fn upsampling_preserves_a_ramp_in_the_interior() {
    let (h, w) = (4, 5);
    let (a, b) = (0.75, -2.0);
    let ramp = flow(Tensor::from_fn(&[h, w, 2], |i| {
        if i[2] == 0 {
            a * i[1] as f64 + b
        } else {
            a * i[0] as f64
        }
    }));
    let up = upsample_flow_2x(&ramp).unwrap();
    // Fine pixel `o` reads source `(o + 0.5) / 2 − 0.5`; interior pixels
    // need no clamping.
    for y in 1..2 * h - 1 {
        for x in 1..2 * w - 1 {
            let (sx, sy) = ((x as f64 + 0.5) / 2.0 - 0.5, (y as f64 + 0.5) / 2.0 - 0.5);
            let (u, v) = up.at(y, x);
            assert!((u - 2.0 * (a * sx + b)).abs() < 1e-12);
            assert!((v - 2.0 * a * sy).abs() < 1e-12);
        }
    }
}

/// Upsampler whose logits are the bias alone.
fn bias_only_upsampler(dim: usize, factor: usize, logits: impl Fn(usize, usize) -> f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    init_upsampler(&mut s, dim, factor, &mut ChaCha8Rng::seed_from_u64(0));
    for name in ["conv.w", "conv.b", "mask.w"] {
        let t = s.get_mut(&format!("{UPSAMPLER_PREFIX}{name}")).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let n = 9 * factor * factor;
    s.insert(
        format!("{UPSAMPLER_PREFIX}mask.b"),
        Tensor::from_fn(&[n], |i| logits(i[0] / 9, i[0] % 9)),
    );
    s
}

#[test]
fn uniform_logits_keep_constants() {
    let s = bias_only_upsampler(8, 4, |_, _| 0.0);
    let f = feat(rand_t(&[3, 3, 8], -1.0, 1.0, 8));
    let up = convex_upsample(&FlowField::constant(3, 3, 1.5, -0.5, 4), &f, &s, 4).unwrap();
    assert_eq!(up.data.shape(), &[12, 12, 2]);
    assert!(up
        .data
        .data()
        .chunks(2)
        .all(|c| (c[0] - 6.0).abs() < 1e-12 && (c[1] + 2.0).abs() < 1e-12));
}

#[test]
fn center_logits_give_nearest_neighbor_upsampling() {
    let factor = 4;
    let s = bias_only_upsampler(8, factor, |_, k| if k == 4 { 200.0 } else { 0.0 });
    let f = feat(rand_t(&[3, 4, 8], -1.0, 1.0, 9));
    let v = flow(rand_t(&[3, 4, 2], -2.0, 2.0, 10));
    let up = convex_upsample(&v, &f, &s, factor).unwrap();
    for y in 0..12 {
        for x in 0..16 {
            let (cu, cv) = v.at(y / factor, x / factor);
            let (u, vv) = up.at(y, x);
            assert!((u - 4.0 * cu).abs() < 1e-9 && (vv - 4.0 * cv).abs() < 1e-9);
        }
    }
}

#[test]
fn one_hot_logits_select_the_named_neighbor() {
    // Neighbor 5 is (dx, dy) = (1, 0), edge-replicated at the right border.
    let s = bias_only_upsampler(4, 2, |_, k| if k == 5 { 200.0 } else { 0.0 });
    let f = feat(rand_t(&[2, 3, 4], -1.0, 1.0, 11));
    let v = flow(rand_t(&[2, 3, 2], -2.0, 2.0, 12));
    let up = convex_upsample(&v, &f, &s, 2).unwrap();
    for y in 0..4 {
        for x in 0..6 {
            let src = (x / 2 + 1).min(2);
            assert!((up.at(y, x).0 - 2.0 * v.at(y / 2, src).0).abs() < 1e-9);
        }
    }
}

fn sharp_quarter_features(h: usize, w: usize, seed: u64) -> FeatureMap<f64> {
    let mut f = sharp_features(h, w, 16, 30.0, seed);
    f.scale = 4;
    f
}

fn no_block_refine() -> RefineConfig {
    RefineConfig {
        num_blocks: 0,
        splits: 2,
        radius: 2,
        propagation: PropagationConfig::Local(3),
    }
}

#[test]
fn exact_integral_coarse_flow_needs_no_residual() {
    let (h, w) = (12, 12);
    let f1 = sharp_quarter_features(h, w, 13);
    let f2 = roll_features(&f1, 2, 4);
    let coarse = FlowField::constant(h / 2, w / 2, 1.0, 2.0, 8);
    let out = refine(&f1, &f2, &coarse, &ParamStore::new(), &no_block_refine()).unwrap();
    // Pixels whose warped neighborhood stays inside the grid.
    for y in 1..h - 5 {
        for x in 1..w - 3 {
            let (u, v) = out.at(y, x);
            assert!(
                (u - 2.0).abs() < 0.05 && (v - 4.0).abs() < 0.05,
                "({y}, {x}): ({u}, {v})"
            );
        }
    }
}

#[test]
fn identical_frames_with_zero_coarse_flow_stay_still() {
    let (h, w) = (8, 8);
    let f = sharp_quarter_features(h, w, 14);
    let out = refine(
        &f,
        &f,
        &FlowField::zeros(h / 2, w / 2, 8),
        &ParamStore::new(),
        &no_block_refine(),
    )
    .unwrap();
    assert!(out.data.data().iter().all(|v| v.abs() < 0.05));
}

#[test]
fn refinement_adds_parameters_only_in_the_upsampling_head() {
    let base = ModelConfig {
        dim: 32,
        ..ModelConfig::default()
    };
    let plain = ModelWeights::<f32>::init(base, 0).unwrap();
    let refined = ModelWeights::<f32>::init(ModelConfig { refine: true, ..base }, 0).unwrap();
    let outside = |w: &ModelWeights<f32>| -> Vec<(String, Vec<usize>)> {
        w.params
            .iter()
            .filter(|(n, _)| !n.starts_with(UPSAMPLER_PREFIX))
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    };
    assert_eq!(outside(&plain), outside(&refined));
    let head = |w: &ModelWeights<f32>| w.params.count_prefix(UPSAMPLER_PREFIX);
    assert_eq!(
        refined.param_count() - head(&refined),
        plain.param_count() - head(&plain)
    );
    // Factor 4 needs 9·16 logits per pixel instead of 9·64.
    let dim = base.dim;
    assert_eq!(head(&refined), dim * dim * 9 + dim + 9 * 16 * dim + 9 * 16);
}

#[test]
fn refinement_passes_gradient_check() {
    let cfg = ModelConfig {
        dim: 8,
        num_blocks: 1,
        splits: 1,
        refine: true,
        refine_splits: 1,
        refine_radius: 1,
    };
    let w = randomized_weights::<f64>(cfg, 3).unwrap();
    let data = SynthConfig {
        height: 16,
        width: 16,
        max_disp: 3,
        ..SynthConfig::default()
    };
    let s = synth_sample(&data, 1).unwrap();
    let (names, report) = model_grad_check(&w, &s, &ForwardOptions::default(), 1e-5).unwrap();
    let bad: Vec<&String> = report
        .params
        .iter()
        .zip(&names)
        .filter(|(p, _)| p.max_rel_error > 1e-3)
        .map(|(_, n)| n)
        .collect();
    assert!(bad.is_empty(), "{bad:?}, max {}", report.max_rel_error());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn propagation_is_a_convex_combination(seed in 0u64..10_000, scale in 0.1f64..10.0, local: bool) {
        let mut f = feat(rand_t(&[4, 5, 8], -1.0, 1.0, seed));
        f.data = f.data.map(|v| v * scale);
        let v = flow(rand_t(&[4, 5, 2], -10.0, 10.0, seed + 1));
        let cfg = if local { PropagationConfig::Local(3) } else { PropagationConfig::Global };
        let out = propagate_flow(&f, &v, cfg).unwrap();
        for c in 0..2 {
            let ch = |t: &Tensor<f64>| t.data().iter().skip(c).step_by(2).copied().collect::<Vec<_>>();
            let (lo, hi) = ch(&v.data).iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            prop_assert!(ch(&out.data).iter().all(|&x| x >= lo - 1e-9 && x <= hi + 1e-9));
        }
    }

    #[test]
    fn convex_upsampling_keeps_constants_for_any_head(seed in 0u64..10_000, u in -5.0f64..5.0, v in -5.0f64..5.0) {
        let mut s = ParamStore::new();
        init_upsampler(&mut s, 8, 4, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = s.get_mut(&format!("{UPSAMPLER_PREFIX}mask.b")).unwrap();
        *b = rand_t(b.shape(), -3.0, 3.0, seed);
        let f = feat(rand_t(&[2, 3, 8], -2.0, 2.0, seed + 1));
        let up = convex_upsample(&FlowField::constant(2, 3, u, v, 4), &f, &s, 4).unwrap();
        prop_assert!(up.data.data().chunks(2).all(|c| (c[0] - 4.0 * u).abs() < 1e-9 && (c[1] - 4.0 * v).abs() < 1e-9));
    }
}
