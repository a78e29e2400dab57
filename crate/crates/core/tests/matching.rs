use std::time::Instant;

use gmflow::matching::{
    backward_flow_from_transpose, chunked_global_matching, coordinate_grid, flow_from_matching, global_correlation,
    local_matching, occlusion_from_fb_check, softmax_flow, softmax_matching, CorrelationVolume, LocalWindow,
    MatchingDistribution,
};
use gmflow::selftest::{roll_features, sharp_features};
use gmflow::{FeatureMap, FlowError, FlowField};
use gmflow_tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_f(h: usize, w: usize, d: usize, seed: u64) -> FeatureMap<f64> {
    FeatureMap::new(
        Tensor::uniform(&[h, w, d], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)),
        8,
    )
    .unwrap()
}

fn fmap(h: usize, w: usize, d: usize, data: Vec<f64>) -> FeatureMap<f64> {
    FeatureMap::new(Tensor::new(&[h, w, d], data).unwrap(), 8).unwrap()
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn distribution(rows: &[&[f64]], h: usize, w: usize) -> MatchingDistribution<f64> {
    let n = rows.len();
    MatchingDistribution {
        data: Tensor::new(&[n, n], rows.concat()).unwrap(),
        height: h,
        width: w,
        scale: 8,
    }
}

/// Flow of the cyclic motion `(dx, dy)` on an `h × w` grid, taking the
/// signed displacement of smallest magnitude to the wrapped target.
fn shift_flow(h: usize, w: usize, dx: i64, dy: i64) -> Tensor<f64> {
    Tensor::from_fn(&[h, w, 2], |i| {
        let (n, t, p) = if i[2] == 0 {
            (w as i64, dx, i[1] as i64)
        } else {
            (h as i64, dy, i[0] as i64)
        };
        ((p + t).rem_euclid(n) - p) as f64
    })
}

#[test]
fn correlation_hand_cases() {
    let ones = fmap(1, 1, 4, vec![1.0; 4]);
    assert_eq!(global_correlation(&ones, &ones).unwrap().data.data(), &[2.0]);
    let a = fmap(1, 1, 4, vec![1.0, 0.0, 0.0, 0.0]);
    let b = fmap(1, 1, 4, vec![0.0, 1.0, 0.0, 0.0]);
    assert_eq!(global_correlation(&a, &b).unwrap().data.data(), &[0.0]);
}

#[test]
fn correlation_matches_naive_loop() {
    let (a, b) = (rand_f(2, 2, 8, 1), rand_f(2, 2, 8, 2));
    let c = global_correlation(&a, &b).unwrap();
    assert_eq!(c.data.shape(), &[4, 4]);
    for p in 0..4 {
        for q in 0..4 {
            let dot: f64 = (0..8)
                .map(|k| a.data.data()[p * 8 + k] * b.data.data()[q * 8 + k])
                .sum();
            assert!((c.data.at(&[p, q]) - dot / 8f64.sqrt()).abs() < 1e-6);
        }
    }
}

#[test]
fn correlation_rejects_mismatched_shapes() {
    let err = global_correlation(&rand_f(2, 2, 8, 1), &rand_f(2, 3, 8, 2)).unwrap_err();
    assert!(matches!(err, FlowError::Tensor(_)), "{err}");
}

#[test]
fn softmax_examples() {
    let c = |row: Vec<f64>| CorrelationVolume {
        data: Tensor::new(&[1, row.len()], row).unwrap(),
        height: 1,
        width: 1,
        scale: 8,
    };
    let m = softmax_matching(&c(vec![0.7; 4])).unwrap();
    assert!(m.data.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    let m = softmax_matching(&c(vec![3f64.ln(), 0.0, 0.0])).unwrap();
    for (v, e) in m.data.data().iter().zip([0.6, 0.2, 0.2]) {
        assert!((v - e).abs() < 1e-12);
    }
}

#[test]
fn sharp_features_give_near_one_hot_rows() {
    let f = sharp_features(4, 4, 16, 100.0, 3);
    let m = softmax_matching(&global_correlation(&f, &f).unwrap()).unwrap();
    for r in 0..16 {
        let max = (0..16).map(|c| m.data.at(&[r, c])).fold(0.0, f64::max);
        assert!(max > 0.999, "row {r}: {max}");
    }
}

#[test]
fn flow_from_matching_examples() {
    let v = flow_from_matching(&distribution(&[&[0.0, 1.0], &[0.0, 1.0]], 1, 2)).unwrap();
    assert_eq!(v.at(0, 0), (1.0, 0.0));
    let v = flow_from_matching(&distribution(&[&[0.5, 0.5], &[0.0, 1.0]], 1, 2)).unwrap();
    assert_eq!(v.at(0, 0), (0.5, 0.0));
}

#[test]
fn coordinate_grid_is_x_then_y() {
    let g = coordinate_grid::<f64>(2, 3);
    assert_eq!(&g.data()[2 * 5..2 * 6], &[2.0, 1.0]);
}

#[test]
fn cyclic_shift_is_recovered_by_global_matching() {
    for (dx, dy) in [(1, 0), (2, 3), (5, 1)] {
        let a = sharp_features(8, 8, 64, 15.0, 4);
        let b = roll_features(&a, dx, dy);
        let v = softmax_flow(&a, &b).unwrap();
        let gt = shift_flow(8, 8, dx as i64, dy as i64);
        assert!(
            max_diff(&v.data, &gt) < 0.1,
            "shift ({dx}, {dy}): {}",
            max_diff(&v.data, &gt)
        );
    }
}

#[test]
fn backward_examples() {
    let (a, b) = (rand_f(4, 4, 8, 5), rand_f(4, 4, 8, 6));
    let back = backward_flow_from_transpose(&global_correlation(&a, &b).unwrap()).unwrap();
    assert!(max_diff(&back.data, &softmax_flow(&b, &a).unwrap().data) < 1e-5);

    let fwd = softmax_flow(&a, &a).unwrap();
    let back = backward_flow_from_transpose(&global_correlation(&a, &a).unwrap()).unwrap();
    assert!(max_diff(&fwd.data, &back.data) < 1e-12);

    let a = sharp_features(8, 8, 64, 15.0, 7);
    let b = roll_features(&a, 3, 2);
    let back = backward_flow_from_transpose(&global_correlation(&a, &b).unwrap()).unwrap();
    assert!(max_diff(&back.data, &shift_flow(8, 8, -3, -2)) < 0.1);
}

#[test]
fn local_matching_follows_exact_init() {
    let (h, w) = (8, 8);
    let a = sharp_features(h, w, 64, 15.0, 8);
    let b = roll_features(&a, 2, 1);
    let gt = shift_flow(h, w, 2, 1);
    // Non-integral but correctly rounding initialization.
    let init = FlowField::new(Tensor::from_fn(&[h, w, 2], |i| gt.at(i) + 0.3), 8).unwrap();
    let v = local_matching(&a, &b, 1, &init).unwrap();
    assert!(max_diff(&v.data, &gt) < 0.1);
}

#[test]
fn equal_candidates_return_rounded_init() {
    let (h, w) = (12, 12);
    let a = fmap(h, w, 4, vec![1.0; h * w * 4]);
    let init = FlowField::constant(h, w, 1.4, -0.6, 8);
    let v = local_matching(&a, &a, 2, &init).unwrap();
    // Pixels whose window stays inside the grid.
    for y in 4..8 {
        for x in 4..8 {
            let (u, vv) = v.at(y, x);
            assert!(
                (u - 1.0).abs() < 1e-12 && (vv + 1.0).abs() < 1e-12,
                "({y}, {x}): ({u}, {vv})"
            );
        }
    }
}

#[test]
fn radius_four_has_81_candidates() {
    assert_eq!(LocalWindow::new(16, 16, 4, None).unwrap().len(), 81);
}

#[test]
fn oversized_radius_is_rejected() {
    let a = rand_f(4, 4, 4, 1);
    let err = local_matching(&a, &a, 4, &FlowField::zeros(4, 4, 8)).unwrap_err();
    assert!(matches!(err, FlowError::Config(_)), "{err}");
}

#[test]
fn out_of_bounds_candidates_are_excluded() {
    // Corner pixel with equal correlations: the expectation only covers the
    // in-grid quarter of the window, so it points into the grid.
    let a = fmap(6, 6, 4, vec![1.0; 144]);
    let v = local_matching(&a, &a, 1, &FlowField::zeros(6, 6, 8)).unwrap();
    let (u, vv) = v.at(0, 0);
    assert!((u - 0.5).abs() < 1e-12 && (vv - 0.5).abs() < 1e-12);
}

#[test]
fn occlusion_examples() {
    let fwd = FlowField::<f64>::constant(4, 12, 5.0, 0.0, 1);
    let consistent = FlowField::constant(4, 12, -5.0, 0.0, 1);
    let m = occlusion_from_fb_check(&fwd, &consistent, 0.01, 0.5).unwrap();
    // Targets of columns 7 and up leave the grid, where the backward flow
    // samples as zero.
    for x in 0..12 {
        assert_eq!(m.get(1, x), x >= 7, "column {x}");
    }
    let m = occlusion_from_fb_check(&fwd, &FlowField::zeros(4, 12, 1), 0.01, 0.5).unwrap();
    assert!(m.get(1, 2));
    let zero = FlowField::<f64>::zeros(4, 12, 1);
    assert_eq!(occlusion_from_fb_check(&zero, &zero, 0.01, 0.5).unwrap().count(), 0);
}

#[test]
fn chunked_matches_monolithic() {
    let (a, b) = (rand_f(16, 16, 32, 9), rand_f(16, 16, 32, 10));
    let mono = softmax_flow(&a, &b).unwrap();
    for splits in [1, 2, 3, 4, 8] {
        let c = chunked_global_matching(&a, &b, splits).unwrap();
        assert!(max_diff(&c.data, &mono.data) < 1e-6, "splits {splits}");
    }
    assert!(chunked_global_matching(&a, &b, 0).is_err());
}

#[test]
fn chunked_runtime_stays_within_twice_monolithic() {
    let (a, b) = (rand_f(32, 32, 32, 11), rand_f(32, 32, 32, 12));
    let best = |f: &dyn Fn()| {
        (0..3)
            .map(|_| {
                let t = Instant::now();
                f();
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let mono = best(&|| {
        softmax_flow(&a, &b).unwrap();
    });
    let chunked = best(&|| {
        chunked_global_matching(&a, &b, 8).unwrap();
    });
    assert!(chunked <= 2.0 * mono, "chunked {chunked:.4}s vs monolithic {mono:.4}s");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rows_are_stochastic(h in 1usize..5, w in 1usize..5, scale in 0.1f64..20.0, seed in 0u64..10_000) {
        let mut a = rand_f(h, w, 8, seed);
        let b = rand_f(h, w, 8, seed + 1);
        a.data = a.data.map(|v| v * scale);
        let m = softmax_matching(&global_correlation(&a, &b).unwrap()).unwrap();
        let n = h * w;
        for r in 0..n {
            let row: Vec<f64> = (0..n).map(|c| m.data.at(&[r, c])).collect();
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn expectation_stays_inside_the_grid(h in 1usize..6, w in 1usize..6, scale in 0.1f64..50.0, seed in 0u64..10_000) {
        let mut a = rand_f(h, w, 8, seed);
        a.data = a.data.map(|v| v * scale);
        let b = rand_f(h, w, 8, seed + 7);
        let v = softmax_flow(&a, &b).unwrap();
        for y in 0..h {
            for x in 0..w {
                let (u, vv) = v.at(y, x);
                let (tx, ty) = (x as f64 + u, y as f64 + vv);
                prop_assert!(tx >= -1e-9 && tx <= (w - 1) as f64 + 1e-9);
                prop_assert!(ty >= -1e-9 && ty <= (h - 1) as f64 + 1e-9);
            }
        }
    }

    #[test]
    fn transpose_equals_swapped_inputs(seed in 0u64..10_000) {
        let (a, b) = (rand_f(3, 5, 8, seed), rand_f(3, 5, 8, seed + 1));
        let c = global_correlation(&a, &b).unwrap();
        prop_assert_eq!(c.transpose().unwrap().data, global_correlation(&b, &a).unwrap().data);
        let back = backward_flow_from_transpose(&c).unwrap();
        prop_assert!(max_diff(&back.data, &softmax_flow(&b, &a).unwrap().data) < 1e-5);
    }

    #[test]
    fn sharp_features_converge_to_argmax(dx in 0usize..6, dy in 0usize..6, seed in 0u64..1000) {
        let a = sharp_features(6, 6, 32, 100.0, seed);
        let b = roll_features(&a, dx, dy);
        let v = softmax_flow(&a, &b).unwrap();
        prop_assert!(max_diff(&v.data, &shift_flow(6, 6, dx as i64, dy as i64)) < 0.1);
    }
}
