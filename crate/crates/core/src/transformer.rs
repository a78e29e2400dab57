//! Joint feature enhancement with windowed self- and cross-attention.
//!
//! Features are split into a fixed number `K×K` of windows, so the window
//! size follows the feature size. Odd blocks use a partition shifted by
//! `(H/2K, W/2K)`, realized as a cyclic roll followed by plain tiling. Since
//! a partition is only a permutation of pixel rows, splitting and merging are
//! row gathers on the flattened `[H·W, D]` features.
//!
//! Every block runs pre-normalized sub-layers with residual connections:
//! self-attention, cross-attention (each frame queries the spatially
//! corresponding window of the other, with shared weights) and a 4× GELU
//! feed-forward network. All attention is single-head.

use std::sync::Arc;

use gmflow_tensor::{Graph, Real, Tensor, Var};
use rand::Rng;

use crate::error::{FlowError, Result};
use crate::params::{fan_in_uniform, Bound, ParamStore};
use crate::types::FeatureMap;

pub const PREFIX: &str = "transformer.";
pub const FFN_EXPANSION: usize = 4;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    /// Windows per axis (`K`).
    pub splits: usize,
    pub shifted: bool,
}

impl WindowConfig {
    pub fn plain(splits: usize) -> Self {
        Self { splits, shifted: false }
    }

    pub fn shifted(splits: usize) -> Self {
        Self { splits, shifted: true }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let m = 2 * self.splits;
        if self.splits == 0 || height % m != 0 || width % m != 0 {
            return Err(FlowError::config(format!(
                "feature size {height}x{width} must be divisible by {m} for {0}x{0} windows",
                self.splits
            )));
        }
        Ok(())
    }

    /// Roll offset `(dy, dx)` of the shifted partition.
    pub fn shift(&self, height: usize, width: usize) -> (usize, usize) {
        if self.shifted {
            (height / (2 * self.splits), width / (2 * self.splits))
        } else {
            (0, 0)
        }
    }
}

/// Row-major pixel indices of every window, windows in row-major order.
pub fn window_partition(height: usize, width: usize, cfg: WindowConfig) -> Result<Vec<Vec<usize>>> {
    cfg.validate(height, width)?;
    let (wh, ww) = (height / cfg.splits, width / cfg.splits);
    let (sy, sx) = cfg.shift(height, width);
    let mut out = Vec::with_capacity(cfg.splits * cfg.splits);
    for a in 0..cfg.splits {
        for b in 0..cfg.splits {
            let mut idx = Vec::with_capacity(wh * ww);
            for i in 0..wh {
                for j in 0..ww {
                    let y = (a * wh + i + sy) % height;
                    let x = (b * ww + j + sx) % width;
                    idx.push(y * width + x);
                }
            }
            out.push(idx);
        }
    }
    Ok(out)
}

/// Precomputed gather tables for one partition.
#[derive(Debug, Clone)]
pub struct Windows {
    pub parts: Vec<Arc<[usize]>>,
    /// Maps each pixel back from the concatenated window order.
    pub inverse: Arc<[usize]>,
}

impl Windows {
    pub fn new(height: usize, width: usize, cfg: WindowConfig) -> Result<Self> {
        let parts = window_partition(height, width, cfg)?;
        let mut inverse = vec![0; height * width];
        for (pos, &pix) in parts.iter().flatten().enumerate() {
            inverse[pix] = pos;
        }
        Ok(Self {
            parts: parts.into_iter().map(Arc::from).collect(),
            inverse: inverse.into(),
        })
    }

    pub fn split(&self, g: &mut Graph<impl Real>, x: Var) -> Result<Vec<Var>> {
        self.parts
            .iter()
            .map(|idx| Ok(g.gather_rows(x, idx.clone())?))
            .collect()
    }

    pub fn merge(&self, g: &mut Graph<impl Real>, windows: &[Var]) -> Result<Var> {
        let cat = g.concat_rows(windows)?;
        Ok(g.gather_rows(cat, self.inverse.clone())?)
    }
}

/// Splits an `[H, W, D]` feature into `K²` window tensors `[H/K, W/K, D]`.
pub fn split_windows<T: Real>(feature: &FeatureMap<T>, cfg: WindowConfig) -> Result<Vec<Tensor<T>>> {
    let (h, w, d) = (feature.height(), feature.width(), feature.dim());
    let windows = Windows::new(h, w, cfg)?;
    let mut g = Graph::new();
    let x = g.constant(feature.data.clone().reshape(&[h * w, d])?);
    let parts = windows.split(&mut g, x)?;
    parts
        .into_iter()
        .map(|v| Ok(g.value(v).clone().reshape(&[h / cfg.splits, w / cfg.splits, d])?))
        .collect()
}

/// Inverse of [`split_windows`].
pub fn merge_windows<T: Real>(
    windows: &[Tensor<T>],
    height: usize,
    width: usize,
    cfg: WindowConfig,
    scale: usize,
) -> Result<FeatureMap<T>> {
    let table = Windows::new(height, width, cfg)?;
    if windows.len() != table.parts.len() {
        return Err(FlowError::config(format!(
            "expected {} windows, got {}",
            table.parts.len(),
            windows.len()
        )));
    }
    let d = windows[0].shape().last().copied().unwrap_or(0);
    let mut g = Graph::new();
    let vars = windows
        .iter()
        .map(|t| Ok(g.constant(t.clone().reshape(&[t.len() / d, d])?)))
        .collect::<Result<Vec<_>>>()?;
    let merged = table.merge(&mut g, &vars)?;
    FeatureMap::new(g.value(merged).clone().reshape(&[height, width, d])?, scale)
}

fn block_name(block: usize, rest: &str) -> String {
    format!("{PREFIX}b{block}.{rest}")
}

pub fn init<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, dim: usize, blocks: usize, rng: &mut R) {
    for b in 0..blocks {
        for kind in ["self", "cross"] {
            for proj in ["q", "k", "v", "o"] {
                store.insert(
                    block_name(b, &format!("{kind}.{proj}")),
                    fan_in_uniform(&[dim, dim], dim, 3.0, rng),
                );
            }
        }
        for ln in ["ln1", "ln2", "ln3"] {
            store.insert(block_name(b, &format!("{ln}.g")), Tensor::ones(&[dim]));
            store.insert(block_name(b, &format!("{ln}.b")), Tensor::zeros(&[dim]));
        }
        store.insert(
            block_name(b, "ffn.w1"),
            fan_in_uniform(&[dim, FFN_EXPANSION * dim], dim, 3.0, rng),
        );
        // Zero output layer: every block starts close to the identity.
        store.insert(block_name(b, "ffn.w2"), Tensor::zeros(&[FFN_EXPANSION * dim, dim]));
    }
}

/// Learned projections of one single-head attention layer, each `[D, D]`.
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
}

impl AttnWeights {
    pub fn bind(p: &Bound, block: usize, kind: &str) -> Result<Self> {
        let get = |proj: &str| p.var(&block_name(block, &format!("{kind}.{proj}")));
        Ok(Self {
            q: get("q")?,
            k: get("k")?,
            v: get("v")?,
            o: get("o")?,
        })
    }
}

/// Scaled dot-product attention `softmax(Q Kᵀ / √D) V` on already projected
/// `[L, D]` inputs.
pub fn scaled_dot_product<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = *g.shape(q).last().unwrap();
    let s = g.matmul_t(q, false, k, true)?;
    let s = g.scale(s, T::one() / T::from_usize(d).unwrap().sqrt());
    let a = g.softmax(s, 1)?;
    Ok(g.matmul(a, v)?)
}

/// Single-head attention with learned projections: `query` attends over
/// `key`/`value` (all `[L, D]`).
pub fn attention<T: Real>(g: &mut Graph<T>, query: Var, key: Var, value: Var, w: &AttnWeights) -> Result<Var> {
    let q = g.matmul(query, w.q)?;
    let k = g.matmul(key, w.k)?;
    let v = g.matmul(value, w.v)?;
    let out = scaled_dot_product(g, q, k, v)?;
    Ok(g.matmul(out, w.o)?)
}

/// Attention restricted to corresponding windows of `query` and `context`
/// (both `[H·W, D]`). Projections commute with the row permutation, so they
/// are applied once on the full maps.
pub fn windowed_attention<T: Real>(
    g: &mut Graph<T>,
    query: Var,
    context: Var,
    w: &AttnWeights,
    windows: &Windows,
) -> Result<Var> {
    let q = g.matmul(query, w.q)?;
    let k = g.matmul(context, w.k)?;
    let v = g.matmul(context, w.v)?;
    let (qs, ks, vs) = (windows.split(g, q)?, windows.split(g, k)?, windows.split(g, v)?);
    let outs = qs
        .iter()
        .zip(&ks)
        .zip(&vs)
        .map(|((&q, &k), &v)| scaled_dot_product(g, q, k, v))
        .collect::<Result<Vec<_>>>()?;
    let merged = windows.merge(g, &outs)?;
    Ok(g.matmul(merged, w.o)?)
}

fn layer_norm<T: Real>(g: &mut Graph<T>, p: &Bound, block: usize, ln: &str, x: Var) -> Result<Var> {
    let gamma = p.var(&block_name(block, &format!("{ln}.g")))?;
    let beta = p.var(&block_name(block, &format!("{ln}.b")))?;
    Ok(g.layer_norm(x, gamma, beta, LN_EPS)?)
}

/// One transformer block on flattened `[H·W, D]` features of both frames.
pub fn block<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    index: usize,
    f1: Var,
    f2: Var,
    windows: &Windows,
) -> Result<(Var, Var)> {
    let self_w = AttnWeights::bind(p, index, "self")?;
    let cross_w = AttnWeights::bind(p, index, "cross")?;

    let mut xs = [f1, f2];
    for x in xs.iter_mut() {
        let n = layer_norm(g, p, index, "ln1", *x)?;
        let a = windowed_attention(g, n, n, &self_w, windows)?;
        *x = g.add(*x, a)?;
    }

    let n1 = layer_norm(g, p, index, "ln2", xs[0])?;
    let n2 = layer_norm(g, p, index, "ln2", xs[1])?;
    let c1 = windowed_attention(g, n1, n2, &cross_w, windows)?;
    let c2 = windowed_attention(g, n2, n1, &cross_w, windows)?;
    xs[0] = g.add(xs[0], c1)?;
    xs[1] = g.add(xs[1], c2)?;

    let w1 = p.var(&block_name(index, "ffn.w1"))?;
    let w2 = p.var(&block_name(index, "ffn.w2"))?;
    for x in xs.iter_mut() {
        let n = layer_norm(g, p, index, "ln3", *x)?;
        let h = g.matmul(n, w1)?;
        let h = g.gelu(h);
        let h = g.matmul(h, w2)?;
        *x = g.add(*x, h)?;
    }
    Ok((xs[0], xs[1]))
}

/// Adds `pos` to both `[H, W, D]` inputs once, then runs `num_blocks` blocks
/// alternating plain (even index) and shifted (odd index) partitions.
pub fn enhance<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    f1: Var,
    f2: Var,
    pos: &Tensor<T>,
    num_blocks: usize,
    splits: usize,
) -> Result<(Var, Var)> {
    let shape = g.shape(f1).to_vec();
    if shape.len() != 3 || g.shape(f2) != shape.as_slice() || pos.shape() != shape.as_slice() {
        return Err(FlowError::config(format!(
            "enhance: feature shapes {:?}/{:?} and encoding {:?} must agree",
            shape,
            g.shape(f2),
            pos.shape()
        )));
    }
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    let pos = g.constant(pos.clone());
    let a = g.add(f1, pos)?;
    let b = g.add(f2, pos)?;
    let mut a = g.reshape(a, &[h * w, d])?;
    let mut b = g.reshape(b, &[h * w, d])?;
    if num_blocks > 0 {
        let plain = Windows::new(h, w, WindowConfig::plain(splits))?;
        let shifted = Windows::new(h, w, WindowConfig::shifted(splits))?;
        for i in 0..num_blocks {
            let windows = if i % 2 == 1 { &shifted } else { &plain };
            (a, b) = block(g, p, i, a, b, windows)?;
        }
    }
    Ok((g.reshape(a, &[h, w, d])?, g.reshape(b, &[h, w, d])?))
}

/// Eager form of [`enhance`].
pub fn enhance_features<T: Real>(
    f1: &FeatureMap<T>,
    f2: &FeatureMap<T>,
    pos: &Tensor<T>,
    weights: &ParamStore<T>,
    num_blocks: usize,
    splits: usize,
) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    let mut g = Graph::new();
    let p = weights.bind(&mut g, false);
    let a = g.constant(f1.data.clone());
    let b = g.constant(f2.data.clone());
    let (a, b) = enhance(&mut g, &p, a, b, pos, num_blocks, splits)?;
    Ok((
        FeatureMap::new(g.value(a).clone(), f1.scale)?,
        FeatureMap::new(g.value(b).clone(), f2.scale)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_split_is_one_window() {
        let f = FeatureMap::new(rand_t(&[4, 6, 3], 1), 8).unwrap();
        let w = split_windows(&f, WindowConfig::plain(1)).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0], f.data);
    }

    #[test]
    fn half_window_shift_on_a_64_by_128_grid() {
        let cfg = WindowConfig::shifted(2);
        assert_eq!(cfg.shift(64, 128), (16, 32));
        let f = FeatureMap::new(Tensor::<f64>::zeros(&[64, 128, 1]), 8).unwrap();
        let w = split_windows(&f, cfg).unwrap();
        assert_eq!(w.len(), 4);
        assert!(w.iter().all(|t| t.shape() == [32, 64, 1]));
    }

    #[test]
    fn shifted_partition_rolls_before_tiling() {
        let f = FeatureMap::new(Tensor::from_fn(&[4, 4, 1], |i| (i[0] * 4 + i[1]) as f64), 8).unwrap();
        let w = split_windows(&f, WindowConfig::shifted(2)).unwrap();
        // Window 0 starts at (1, 1) after the roll.
        assert_eq!(w[0].data(), &[5.0, 6.0, 9.0, 10.0]);
        // Window 3 wraps around both axes.
        assert_eq!(w[3].data(), &[15.0, 12.0, 3.0, 0.0]);
    }

    #[test]
    fn indivisible_sizes_are_rejected() {
        assert!(window_partition(6, 8, WindowConfig::plain(2)).is_err());
        assert!(window_partition(8, 8, WindowConfig::plain(0)).is_err());
    }

    #[test]
    fn partitions_are_bijections() {
        for cfg in [
            WindowConfig::plain(2),
            WindowConfig::shifted(2),
            WindowConfig::shifted(4),
        ] {
            let parts = window_partition(8, 16, cfg).unwrap();
            let mut seen = vec![0; 128];
            parts.iter().flatten().for_each(|&i| seen[i] += 1);
            assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn attention_over_one_element_returns_projected_value() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = AttnWeights {
            q: g.constant(Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng)),
            k: g.constant(Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng)),
            v: g.constant(Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng)),
            o: g.constant(Tensor::identity(3)),
        };
        let q = g.constant(rand_t(&[1, 3], 3));
        let kv = g.constant(rand_t(&[1, 3], 4));
        let out = attention(&mut g, q, kv, kv, &w).unwrap();
        let want = g.matmul(kv, w.v).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(want)) < 1e-15);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(rand_t(&[2, 4], 5));
        let k = g.constant(Tensor::from_fn(&[3, 4], |i| [0.3, -0.2, 0.9, 0.1][i[1]]));
        let v = g.constant(rand_t(&[3, 4], 6));
        let out = scaled_dot_product(&mut g, q, k, v).unwrap();
        let vt = g.value(v).clone();
        for r in 0..2 {
            for c in 0..4 {
                let mean = (0..3).map(|i| vt.at(&[i, c])).sum::<f64>() / 3.0;
                assert!((g.value(out).at(&[r, c]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mats: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng)).collect();
        let x = rand_t(&[3, 4], 8);
        let y = rand_t(&[3, 4], 9);
        let mut g = Graph::new();
        let w = AttnWeights {
            q: g.constant(mats[0].clone()),
            k: g.constant(mats[1].clone()),
            v: g.constant(mats[2].clone()),
            o: g.constant(mats[3].clone()),
        };
        let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
        let out = attention(&mut g, xv, yv, yv, &w).unwrap();

        let mm = |a: &Tensor<f64>, b: &Tensor<f64>| {
            Tensor::from_fn(&[a.shape()[0], b.shape()[1]], |i| {
                (0..a.shape()[1]).map(|p| a.at(&[i[0], p]) * b.at(&[p, i[1]])).sum()
            })
        };
        let (q, k, v) = (mm(&x, &mats[0]), mm(&y, &mats[1]), mm(&y, &mats[2]));
        let mut o = Tensor::zeros(&[3, 4]);
        for i in 0..3 {
            let s: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|c| q.at(&[i, c]) * k.at(&[j, c])).sum::<f64>() / 2.0)
                .collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for c in 0..4 {
                o.set(&[i, c], (0..3).map(|j| s[j].exp() / z * v.at(&[j, c])).sum());
            }
        }
        let want = mm(&o, &mats[3]);
        assert!(g.value(out).max_abs_diff(&want) < 1e-6);
    }
}
