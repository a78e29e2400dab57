//! Built-in verification suites.
//!
//! Every check builds its own seeded instance and compares against an
//! independent computation, so a broken layer shows up as a named failure.
//! The quick level runs in seconds; the full level adds the model-wide
//! gradient check, large-displacement recovery and the propagation trend.

use std::time::Instant;

use gmflow_tensor::{grad_check, GradCheckReport, Graph, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{decode, encode, Checkpoint};
use crate::data::flo::{decode_flo, encode_flo};
use crate::data::metrics::compute_metrics;
use crate::data::synth::{synth_sample, Sample, SynthConfig};
use crate::error::Result;
use crate::loss::{flow_loss, flow_loss_var, LossConfig};
use crate::matching::{
    backward_flow_from_transpose, chunked_global_matching, global_correlation, global_match, local_matching,
    softmax_flow, softmax_matching,
};
use crate::model::{forward_graph, ForwardOptions, ModelConfig, ModelWeights};
use crate::params::Bound;
use crate::refine::{propagate, propagate_flow, PropagationConfig};
use crate::transformer::{merge_windows, split_windows, window_partition, WindowConfig};
use crate::types::{FeatureMap, FlowField, OcclusionMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Quick,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub level: Level,
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

type Check = fn() -> Result<(bool, String)>;

const QUICK: &[(&str, Check)] = &[
    ("softmax_rows", check_softmax_rows),
    ("transpose_identity", check_transpose_identity),
    ("global_recovery", check_global_recovery),
    ("chunked_vs_monolithic", check_chunked),
    ("window_bijection", check_window_bijection),
    ("component_gradients", check_component_gradients),
    ("loss_arithmetic", check_loss_arithmetic),
    ("metrics_decomposition", check_metrics),
    ("flo_round_trip", check_flo),
    ("checkpoint_round_trip", check_checkpoint),
];

const FULL: &[(&str, Check)] = &[
    ("model_gradients", check_model_gradients),
    ("large_displacement", check_large_displacement),
    ("propagation_trend", check_propagation_trend),
];

/// Check names in execution order.
pub fn check_names(level: Level) -> Vec<&'static str> {
    suite(level).map(|(n, _)| *n).collect()
}

fn suite(level: Level) -> impl Iterator<Item = &'static (&'static str, Check)> {
    let extra: &[(&str, Check)] = if level == Level::Full { FULL } else { &[] };
    QUICK.iter().chain(extra)
}

/// Runs every check of `level`; errors inside a check count as failures.
pub fn run_selftest(level: Level) -> SelftestReport {
    let checks = suite(level)
        .map(|(name, check)| {
            let start = Instant::now();
            let (passed, detail) = match check() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult {
                name: name.to_string(),
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect();
    SelftestReport { level, checks }
}

/// `[h, w, d]` features whose pixels are random directions of norm `norm`.
/// Large norms make every pixel match only itself.
pub fn sharp_features(h: usize, w: usize, d: usize, norm: f64, seed: u64) -> FeatureMap<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(h * w * d);
    for _ in 0..h * w {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| x / n * norm));
    }
    FeatureMap::new(Tensor::new(&[h, w, d], data).expect("sizes agree"), 8).expect("rank 3")
}

/// Features of the second frame under the cyclic motion `(dx, dy)`:
/// `out((p + t) mod size) = f(p)`.
pub fn roll_features(f: &FeatureMap<f64>, dx: usize, dy: usize) -> FeatureMap<f64> {
    let (h, w) = (f.height(), f.width());
    let data = Tensor::from_fn(f.data.shape(), |i| {
        f.data.at(&[(i[0] + h - dy % h) % h, (i[1] + w - dx % w) % w, i[2]])
    });
    FeatureMap::new(data, f.scale).expect("rank 3")
}

/// Exact flow of the cyclic motion `(dx, dy)`, or of its inverse when
/// `backward` is set.
pub fn cyclic_flow(h: usize, w: usize, dx: usize, dy: usize, backward: bool) -> FlowField<f64> {
    let data = Tensor::from_fn(&[h, w, 2], |i| {
        let (n, t, p) = if i[2] == 0 { (w, dx, i[1]) } else { (h, dy, i[0]) };
        let target = if backward { (p + n - t % n) % n } else { (p + t) % n };
        target as f64 - p as f64
    });
    FlowField::new(data, 8).expect("rank 3")
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn verdict(value: f64, tol: f64, what: &str) -> (bool, String) {
    (value <= tol, format!("{what} {value:.3e} (tolerance {tol:.0e})"))
}

fn check_softmax_rows() -> Result<(bool, String)> {
    let f1 = sharp_features(6, 8, 16, 3.0, 1);
    let f2 = sharp_features(6, 8, 16, 3.0, 2);
    let m = softmax_matching(&global_correlation(&f1, &f2)?)?;
    let n = 48;
    let worst = m
        .data
        .data()
        .chunks(n)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(verdict(worst, 1e-6, "max row-sum deviation"))
}

fn check_transpose_identity() -> Result<(bool, String)> {
    let f1 = sharp_features(6, 8, 16, 2.0, 3);
    let f2 = sharp_features(6, 8, 16, 2.0, 4);
    let bwd = backward_flow_from_transpose(&global_correlation(&f1, &f2)?)?;
    let swapped = softmax_flow(&f2, &f1)?;
    let (ok, detail) = verdict(
        max_abs_diff(&bwd.data, &swapped.data),
        1e-5,
        "transpose vs swapped max diff",
    );
    // The identity alone cannot catch a sign error shared by both paths.
    let a = sharp_features(6, 8, 64, 20.0, 5);
    let b = roll_features(&a, 3, 2);
    let bwd = backward_flow_from_transpose(&global_correlation(&a, &b)?)?;
    let err = max_abs_diff(&bwd.data, &cyclic_flow(6, 8, 3, 2, true).data);
    Ok((ok && err < 0.01, format!("{detail}; backward motion error {err:.3e}")))
}

fn check_global_recovery() -> Result<(bool, String)> {
    let a = sharp_features(8, 8, 64, 20.0, 6);
    let b = roll_features(&a, 5, 3);
    let flow = softmax_flow(&a, &b)?;
    Ok(verdict(
        max_abs_diff(&flow.data, &cyclic_flow(8, 8, 5, 3, false).data),
        0.01,
        "max flow error",
    ))
}

fn check_chunked() -> Result<(bool, String)> {
    let f1 = sharp_features(8, 8, 16, 4.0, 7);
    let f2 = sharp_features(8, 8, 16, 4.0, 8);
    let full = softmax_flow(&f1, &f2)?;
    let worst = [1, 2, 4, 8]
        .iter()
        .map(|&s| chunked_global_matching(&f1, &f2, s).map(|c| max_abs_diff(&c.data, &full.data)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(verdict(worst, 1e-6, "max chunked diff"))
}

fn check_window_bijection() -> Result<(bool, String)> {
    for (h, w, s) in [(8, 8, 2), (12, 8, 2), (16, 16, 4), (12, 18, 3)] {
        for cfg in [WindowConfig::plain(s), WindowConfig::shifted(s)] {
            let parts = window_partition(h, w, cfg)?;
            let mut seen = vec![false; h * w];
            for &i in parts.iter().flatten() {
                if std::mem::replace(&mut seen[i], true) {
                    return Ok((false, format!("{h}x{w} splits {s}: pixel {i} in two windows")));
                }
            }
            if seen.contains(&false) {
                return Ok((false, format!("{h}x{w} splits {s}: partition misses pixels")));
            }
            let f = sharp_features(h, w, 3, 1.0, 9);
            let back = merge_windows(&split_windows(&f, cfg)?, h, w, cfg, f.scale)?;
            if back != f {
                return Ok((false, format!("{h}x{w} splits {s}: merge(split(x)) != x")));
            }
        }
    }
    Ok((true, "partitions are bijections and round trips are exact".into()))
}

fn check_component_gradients() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let f1 = Tensor::<f64>::uniform(&[4, 4, 6], -1.0, 1.0, &mut rng);
    let f2 = Tensor::<f64>::uniform(&[4, 4, 6], -1.0, 1.0, &mut rng);
    let f = |g: &mut Graph<f64>, v: &[Var]| -> gmflow_tensor::Result<Var> {
        let run = |g: &mut Graph<f64>| -> Result<Var> {
            let (flow, _) = global_match(g, v[0], v[1])?;
            let flow = propagate(g, v[0], flow, PropagationConfig::Global)?;
            let sq = g.mul(flow, flow)?;
            Ok(g.sum(sq))
        };
        run(g).map_err(|e| TensorError::Oracle(e.to_string()))
    };
    let report = grad_check(f, &[f1, f2], 1e-5)?;
    Ok(verdict(report.max_rel_error(), 1e-4, "max relative error"))
}

fn check_loss_arithmetic() -> Result<(bool, String)> {
    let gt = FlowField::<f64>::zeros(2, 2, 1);
    // Per-pixel L1 errors of 1.0 and 0.5.
    let p1 = FlowField::constant(2, 2, 1.0, 0.0, 1);
    let p2 = FlowField::constant(2, 2, 0.0, -0.5, 1);
    let valid = vec![true; 4];
    let l = flow_loss(&[p1, p2], &gt, &valid, &LossConfig { gamma: 0.9 })?;
    let zero = flow_loss(std::slice::from_ref(&gt), &gt, &valid, &LossConfig::default())?;
    Ok((
        (l - 1.4).abs() < 1e-12 && zero == 0.0,
        format!("loss {l}, zero case {zero}"),
    ))
}

fn check_metrics() -> Result<(bool, String)> {
    let sample = synth_sample::<f64>(
        &SynthConfig {
            height: 16,
            width: 16,
            max_disp: 4,
            occluder_prob: 1.0,
            ..SynthConfig::default()
        },
        0,
    )?;
    let pred = FlowField::zeros(16, 16, 1);
    let r = compute_metrics(&pred, &sample.flow, Some(&sample.occlusion), None)?;
    let lhs = r.epe_all * r.n_all as f64;
    let rhs = r.epe_matched * r.n_matched as f64 + r.epe_unmatched * r.n_unmatched as f64;
    let gap = (lhs - rhs).abs() / lhs.max(1.0);
    let partition = r.n_buckets.iter().sum::<usize>() == r.n_all;
    Ok((
        gap < 1e-12 && partition,
        format!("decomposition gap {gap:.1e}, buckets partition: {partition}"),
    ))
}

fn check_flo() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let flow = FlowField::new(Tensor::<f32>::uniform(&[7, 5, 2], -50.0, 50.0, &mut rng), 1)?;
    let back = decode_flo::<f32>(&encode_flo(&flow)?)?;
    let exact = back
        .data
        .data()
        .iter()
        .zip(flow.data.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((exact, format!("{} values, bit-exact: {exact}", flow.data.len())))
}

/// Initial weights with every all-zero tensor replaced by small random
/// values, so each path carries gradient.
pub fn randomized_weights<T: gmflow_tensor::Real>(config: ModelConfig, seed: u64) -> Result<ModelWeights<T>> {
    let mut w = ModelWeights::<T>::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, t) in w.params.iter_mut() {
        if t.data().iter().all(|v| v.is_zero()) {
            *t = Tensor::uniform(t.shape(), -0.1, 0.1, &mut rng);
        }
    }
    Ok(w)
}

fn check_checkpoint() -> Result<(bool, String)> {
    let cfg = ModelConfig {
        dim: 8,
        num_blocks: 1,
        splits: 1,
        ..ModelConfig::default()
    };
    let w = randomized_weights::<f32>(cfg, 12)?;
    let back = decode::<f32>(&encode(&Checkpoint::from_weights(&w))?)?;
    let exact = back.weights.params.len() == w.params.len()
        && w.params.iter().all(|(n, t)| {
            back.weights.params.get(n).is_some_and(|b| {
                b.shape() == t.shape() && b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
        });
    Ok((exact, format!("{} tensors, bit-exact: {exact}", w.params.len())))
}

/// The tiny model of the gradient oracle: 16×16 images, D = 8, one block,
/// no refinement, zero-initialized tensors replaced by small random values
/// so every path carries gradient.
pub fn tiny_grad_check_setup() -> Result<(ModelWeights<f64>, Sample<f64>)> {
    let cfg = ModelConfig {
        dim: 8,
        num_blocks: 1,
        splits: 1,
        ..ModelConfig::default()
    };
    let weights = randomized_weights(cfg, 1)?;
    let data = SynthConfig {
        height: 16,
        width: 16,
        max_disp: 3,
        ..SynthConfig::default()
    };
    // Sample 1 keeps every ReLU input clear of zero by more than the step.
    Ok((weights, synth_sample(&data, 1)?))
}

fn check_model_gradients() -> Result<(bool, String)> {
    let (w, s) = tiny_grad_check_setup()?;
    let (names, report) = model_grad_check(&w, &s, &ForwardOptions::default(), 1e-5)?;
    let worst = report
        .params
        .iter()
        .zip(&names)
        .max_by(|a, b| a.0.max_rel_error.total_cmp(&b.0.max_rel_error))
        .map(|(_, n)| format!(" at {n}"))
        .unwrap_or_default();
    let (ok, detail) = verdict(report.max_rel_error(), 1e-3, "max relative error");
    Ok((ok, format!("{detail}{worst}")))
}

/// Flow recovered by global matching and by radius-4 local matching on a
/// cyclic shift of half the width of a 32×32 grid, with the exact flow.
pub fn large_displacement_instance() -> Result<(FlowField<f64>, FlowField<f64>, FlowField<f64>)> {
    let n = 32;
    let a = sharp_features(n, n, 128, 40.0, 13);
    let b = roll_features(&a, n / 2, 0);
    let global = softmax_flow(&a, &b)?;
    let local = local_matching(&a, &b, 4, &FlowField::zeros(n, n, 8))?;
    Ok((global, local, cyclic_flow(n, n, n / 2, 0, false)))
}

fn check_large_displacement() -> Result<(bool, String)> {
    let (global, local, gt) = large_displacement_instance()?;
    let g = max_abs_diff(&global.data, &gt.data);
    let l = compute_metrics(&local, &gt, None, None)?.epe_all;
    Ok((
        g < 0.1 && l >= 8.0,
        format!("global max error {g:.3e} (< 0.1), local EPE {l:.2} (>= 8)"),
    ))
}

fn check_propagation_trend() -> Result<(bool, String)> {
    // Cluster A is the left half, cluster B the right; features are two
    // orthogonal directions. One cluster-A pixel carries a corrupted flow.
    let (h, w) = (4, 8);
    let feat = Tensor::from_fn(&[h, w, 2], |i| if (i[1] < w / 2) == (i[2] == 0) { 3.0 } else { 0.0 });
    let flow = Tensor::from_fn(&[h, w, 2], |i| match (i[0], i[1], i[2]) {
        (1, 1, 0) => 9.0,
        (_, x, 0) if x < w / 2 => 2.0,
        (_, _, 0) => -3.0,
        _ => 1.0,
    });
    let gt = FlowField::new(
        Tensor::from_fn(&[h, w, 2], |i| match i[2] {
            0 if i[1] < w / 2 => 2.0,
            0 => -3.0,
            _ => 1.0,
        }),
        8,
    )?;
    let flow = FlowField::new(flow, 8)?;
    let mut occ = vec![false; h * w];
    occ[w + 1] = true;
    let occ = OcclusionMask::new(h, w, occ)?;
    let before = compute_metrics(&flow, &gt, Some(&occ), None)?;
    let after = compute_metrics(
        &propagate_flow(&FeatureMap::new(feat, 8)?, &flow, PropagationConfig::Global)?,
        &gt,
        Some(&occ),
        None,
    )?;
    Ok((
        after.epe_unmatched < before.epe_unmatched,
        format!(
            "corrupted pixel EPE {:.3} -> {:.3}",
            before.epe_unmatched, after.epe_unmatched
        ),
    ))
}

/// Finite-difference check of the full training loss with respect to every
/// parameter tensor. Returns parameter names in the report's order.
pub fn model_grad_check(
    weights: &ModelWeights<f64>,
    sample: &Sample<f64>,
    opts: &ForwardOptions,
    step: f64,
) -> Result<(Vec<String>, GradCheckReport)> {
    let names: Vec<String> = weights.params.names().cloned().collect();
    let tensors: Vec<Tensor<f64>> = weights.params.iter().map(|(_, t)| t.clone()).collect();
    let cfg = weights.config;
    let loss_cfg = LossConfig::default();
    let f = |g: &mut Graph<f64>, vars: &[Var]| -> gmflow_tensor::Result<Var> {
        let p = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        let f1 = g.constant(sample.images.frame1.clone());
        let f2 = g.constant(sample.images.frame2.clone());
        let run = |g: &mut Graph<f64>| -> Result<Var> {
            let out = forward_graph(g, &p, &cfg, f1, f2, opts)?;
            flow_loss_var(g, &out.predictions, &sample.flow.data, &sample.valid, &loss_cfg)
        };
        run(g).map_err(|e| TensorError::Oracle(e.to_string()))
    };
    let report = grad_check(f, &tensors, step)?;
    Ok((names, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let r = run_selftest(Level::Quick);
        for c in &r.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn inverted_matching_is_caught_by_name() {
        let r = crate::matching::with_inverted_matching(|| run_selftest(Level::Quick));
        let failed: Vec<&str> = r.failures().map(|c| c.name.as_str()).collect();
        assert!(failed.contains(&"transpose_identity"), "{failed:?}");
        assert!(failed.contains(&"global_recovery"), "{failed:?}");
    }
}
