use gmflow::backbone::{extract_features, init, positional_encoding};
use gmflow::{FlowError, ImagePair, ParamStore};
use gmflow_tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn weights(dim: usize, seed: u64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    init(&mut s, dim, &mut ChaCha8Rng::seed_from_u64(seed));
    s
}

fn image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
    Tensor::uniform(&[3, h, w], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn frames_share_weights() {
    let w = weights(16, 1);
    let (a, b) = (image(1, 32, 32), image(2, 32, 32));
    let fwd = extract_features(&ImagePair::new(a.clone(), b.clone()).unwrap(), &w, &[8, 4], 8).unwrap();
    let rev = extract_features(&ImagePair::new(b, a).unwrap(), &w, &[8, 4], 8).unwrap();
    for (x, y) in fwd.iter().zip(&rev) {
        assert_eq!(x.0, y.1);
        assert_eq!(x.1, y.0);
    }
}

#[test]
fn interior_features_follow_a_whole_cell_translation() {
    let w = weights(16, 2);
    let (h, wd) = (32, 128);
    let big = image(3, h, wd + 8);
    let crop = |off: usize| Tensor::from_fn(&[3, h, wd], |i| big.at(&[i[0], i[1], i[2] + off]));
    let pair = ImagePair::new(crop(0), crop(8)).unwrap();
    let out = extract_features(&pair, &w, &[8], 8).unwrap();
    let (f1, f2) = (&out[0].0.data, &out[0].1.data);
    // Cell x + 1 of frame 1 sees the same pixels as cell x of frame 2, away
    // from the zero-padded border. Rows are padded identically.
    for y in 0..4 {
        for x in 4..11 {
            for c in 0..16 {
                assert!(
                    (f1.at(&[y, x + 1, c]) - f2.at(&[y, x, c])).abs() < 1e-9,
                    "({y}, {x}, {c})"
                );
            }
        }
    }
}

#[test]
fn unsupported_inputs_are_rejected() {
    let w = weights(16, 3);
    let pair = ImagePair::new(image(1, 36, 32), image(2, 36, 32)).unwrap();
    assert!(matches!(
        extract_features(&pair, &w, &[8], 8),
        Err(FlowError::Config(_))
    ));
    let pair = ImagePair::new(image(1, 32, 32), image(2, 32, 32)).unwrap();
    assert!(extract_features(&pair, &w, &[2], 8).is_err());
    assert!(positional_encoding::<f64>(4, 4, 30).is_err());
}

#[test]
fn encoding_matches_the_sinusoid_formula() {
    let pe = positional_encoding::<f64>(8, 8, 32).unwrap();
    let (y, x) = (3.0f64, 5.0f64);
    for c in 0..16 {
        let freq = 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / 16.0);
        let (row, col) = if c % 2 == 0 {
            ((y * freq).sin(), (x * freq).sin())
        } else {
            ((y * freq).cos(), (x * freq).cos())
        };
        assert!((pe.at(&[3, 5, c]) - row).abs() < 1e-12, "row channel {c}");
        assert!((pe.at(&[3, 5, 16 + c]) - col).abs() < 1e-12, "column channel {c}");
    }
    // The first pair of each half is (sin, cos) of the raw coordinate.
    assert!((pe.at(&[3, 5, 0]) - 3f64.sin()).abs() < 1e-12);
    assert!((pe.at(&[3, 5, 17]) - 5f64.cos()).abs() < 1e-12);
}

#[test]
fn encoding_distinguishes_positions() {
    let pe = positional_encoding::<f64>(8, 8, 32).unwrap();
    let cell = |y: usize, x: usize| (0..32).map(|c| pe.at(&[y, x, c])).collect::<Vec<_>>();
    let cells: Vec<Vec<f64>> = (0..64).map(|p| cell(p / 8, p % 8)).collect();
    for i in 0..64 {
        for j in i + 1..64 {
            let d: f64 = cells[i].iter().zip(&cells[j]).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(d > 1e-6, "cells {i} and {j}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn encoding_is_bounded(h in 1usize..12, w in 1usize..12, quarter in 1usize..12) {
        let pe = positional_encoding::<f64>(h, w, 4 * quarter).unwrap();
        prop_assert_eq!(pe.shape(), &[h, w, 4 * quarter]);
        prop_assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn features_are_deterministic_and_finite(seed in 0u64..1000) {
        let w = weights(8, seed);
        let pair = ImagePair::new(image(seed, 16, 16), image(seed + 1, 16, 16)).unwrap();
        let a = extract_features(&pair, &w, &[8, 4], 8).unwrap();
        let b = extract_features(&pair, &w, &[8, 4], 8).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.iter().all(|(x, y)| x.data.data().iter().chain(y.data.data()).all(|v| v.is_finite())));
    }
}
