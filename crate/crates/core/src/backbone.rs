//! Weight-sharing convolutional feature extractor and positional encoding.
//!
//! The trunk is a plain residual network (no normalization): a stride-2 7×7
//! stem, two residual blocks at 1/2 resolution, and two more at 1/4 (the
//! first one strided). A single 3×3 head convolution produces `D`-channel
//! features; it runs with stride 2 for the 1/8 map and stride 1 for the 1/4
//! map, with the same weights.

use gmflow_tensor::{Graph, Real, Tensor, Var};
use rand::Rng;

use crate::error::{FlowError, Result};
use crate::params::{fan_in_uniform, Bound, ParamStore};
use crate::types::{FeatureMap, ImagePair};

pub const PREFIX: &str = "backbone.";

/// Channel widths of the 1/2 and 1/4 trunk stages for feature dimension `dim`.
pub fn trunk_widths(dim: usize) -> (usize, usize) {
    ((dim / 2).max(2), (3 * dim / 4).max(3))
}

fn conv_param<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    out: usize,
    inp: usize,
    k: usize,
    rng: &mut R,
) {
    store.insert(
        format!("{PREFIX}{name}.w"),
        fan_in_uniform(&[out, inp, k, k], inp * k * k, 6.0, rng),
    );
    store.insert(format!("{PREFIX}{name}.b"), Tensor::zeros(&[out]));
}

pub fn init<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, dim: usize, rng: &mut R) {
    let (c1, c2) = trunk_widths(dim);
    conv_param(store, "stem", c1, 3, 7, rng);
    for b in 0..2 {
        conv_param(store, &format!("stage1.{b}.conv1"), c1, c1, 3, rng);
        conv_param(store, &format!("stage1.{b}.conv2"), c1, c1, 3, rng);
    }
    conv_param(store, "stage2.0.conv1", c2, c1, 3, rng);
    conv_param(store, "stage2.0.conv2", c2, c2, 3, rng);
    conv_param(store, "stage2.0.skip", c2, c1, 1, rng);
    conv_param(store, "stage2.1.conv1", c2, c2, 3, rng);
    conv_param(store, "stage2.1.conv2", c2, c2, 3, rng);
    conv_param(store, "head", dim, c2, 3, rng);
}

fn conv(g: &mut Graph<impl Real>, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = p.var(&format!("{PREFIX}{name}.w"))?;
    let b = p.var(&format!("{PREFIX}{name}.b"))?;
    Ok(g.conv2d(x, w, Some(b), stride, pad)?)
}

fn residual<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let h = conv(g, p, &format!("{name}.conv1"), x, stride, 1)?;
    let h = g.relu(h);
    let h = conv(g, p, &format!("{name}.conv2"), h, 1, 1)?;
    let skip = if stride == 1 {
        x
    } else {
        conv(g, p, &format!("{name}.skip"), x, stride, 0)?
    };
    let sum = g.add(h, skip)?;
    Ok(g.relu(sum))
}

/// Shared 1/4-resolution trunk: `[3, H, W]` → `[c2, H/4, W/4]`.
pub fn trunk<T: Real>(g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Var> {
    let x = conv(g, p, "stem", image, 2, 3)?;
    let mut x = g.relu(x);
    for b in 0..2 {
        x = residual(g, p, &format!("stage1.{b}"), x, 1)?;
    }
    x = residual(g, p, "stage2.0", x, 2)?;
    residual(g, p, "stage2.1", x, 1)
}

/// Shared-weight head producing `[H', W', D]` features; stride 2 yields the
/// 1/8 map and stride 1 the 1/4 map.
pub fn head<T: Real>(g: &mut Graph<T>, p: &Bound, trunk: Var, stride: usize) -> Result<Var> {
    let f = conv(g, p, "head", trunk, stride, 1)?;
    Ok(g.permute(f, &[1, 2, 0])?)
}

/// Checks that both image sides are multiples of `multiple`.
pub fn check_image_dims(height: usize, width: usize, multiple: usize) -> Result<()> {
    if height == 0 || width == 0 || height % multiple != 0 || width % multiple != 0 {
        return Err(FlowError::config(format!(
            "image size {height}x{width} must be a multiple of {multiple} on both sides"
        )));
    }
    Ok(())
}

/// Graph-level extraction for both frames. Returns `(f1, f2)` per requested
/// scale, in the order given.
pub fn features<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    frame1: Var,
    frame2: Var,
    scales: &[usize],
) -> Result<Vec<(Var, Var)>> {
    let t1 = trunk(g, p, frame1)?;
    let t2 = trunk(g, p, frame2)?;
    scales
        .iter()
        .map(|&s| {
            let stride = match s {
                8 => 2,
                4 => 1,
                other => return Err(FlowError::config(format!("unsupported feature scale {other}"))),
            };
            Ok((head(g, p, t1, stride)?, head(g, p, t2, stride)?))
        })
        .collect()
}

/// Extracts `(F1, F2)` at each requested scale (8 and/or 4).
///
/// `multiple` is the divisibility the caller's window configuration needs;
/// it is at least the largest requested scale.
pub fn extract_features<T: Real>(
    images: &ImagePair<T>,
    weights: &ParamStore<T>,
    scales: &[usize],
    multiple: usize,
) -> Result<Vec<(FeatureMap<T>, FeatureMap<T>)>> {
    let largest = scales.iter().copied().max().unwrap_or(8);
    check_image_dims(images.height(), images.width(), multiple.max(largest))?;
    let mut g = Graph::new();
    let p = weights.bind(&mut g, false);
    let f1 = g.constant(images.frame1.clone());
    let f2 = g.constant(images.frame2.clone());
    let out = features(&mut g, &p, f1, f2, scales)?;
    out.into_iter()
        .zip(scales)
        .map(|((a, b), &s)| {
            Ok((
                FeatureMap::new(g.value(a).clone(), s)?,
                FeatureMap::new(g.value(b).clone(), s)?,
            ))
        })
        .collect()
}

/// Fixed 2-D sine/cosine encoding `[H, W, D]`.
///
/// Channels `[0, D/2)` encode the row `y`, `[D/2, D)` the column `x`. Within a
/// half, channel `c` uses frequency `1 / 10000^(2⌊c/2⌋ / (D/2))`, with sine on
/// even and cosine on odd channels.
pub fn positional_encoding<T: Real>(height: usize, width: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(FlowError::config(format!(
            "positional encoding needs a feature dimension divisible by 4, got {dim}"
        )));
    }
    let half = dim / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|c| 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / half as f64))
        .collect();
    Ok(Tensor::from_fn(&[height, width, dim], |i| {
        let (pos, c) = if i[2] < half {
            (i[0] as f64, i[2])
        } else {
            (i[1] as f64, i[2] - half)
        };
        let a = pos * inv_freq[c];
        T::lit(if c % 2 == 0 { a.sin() } else { a.cos() })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weights(dim: usize) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init(&mut s, dim, &mut ChaCha8Rng::seed_from_u64(3));
        s
    }

    fn image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        Tensor::uniform(&[3, h, w], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn shapes_follow_scale() {
        let w = weights(32);
        let pair = ImagePair::new(image(1, 64, 64), image(2, 64, 64)).unwrap();
        let out = extract_features(&pair, &w, &[8, 4], 8).unwrap();
        assert_eq!(out[0].0.data.shape(), &[8, 8, 32]);
        assert_eq!(out[1].1.data.shape(), &[16, 16, 32]);
        assert_eq!(out[0].0.scale, 8);
    }

    #[test]
    fn identical_frames_give_identical_features_and_swap_is_exact() {
        let w = weights(8);
        let a = image(4, 32, 32);
        let b = image(5, 32, 32);
        let same = extract_features(&ImagePair::new(a.clone(), a.clone()).unwrap(), &w, &[8], 8).unwrap();
        assert_eq!(same[0].0, same[0].1);
        let fwd = extract_features(&ImagePair::new(a.clone(), b.clone()).unwrap(), &w, &[8, 4], 8).unwrap();
        let rev = extract_features(&ImagePair::new(b, a).unwrap(), &w, &[8, 4], 8).unwrap();
        for (f, r) in fwd.iter().zip(&rev) {
            assert_eq!(f.0, r.1);
            assert_eq!(f.1, r.0);
        }
    }

    #[test]
    fn eighth_scale_is_strided_quarter_scale() {
        let w = weights(8);
        let mut g = Graph::new();
        let p = w.bind(&mut g, false);
        let img = g.constant(Tensor::full(&[3, 32, 32], 0.3));
        let t = trunk(&mut g, &p, img).unwrap();
        let e = head(&mut g, &p, t, 2).unwrap();
        let q = head(&mut g, &p, t, 1).unwrap();
        let (e, q) = (g.value(e), g.value(q));
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..8 {
                    assert_eq!(e.at(&[y, x, c]), q.at(&[2 * y, 2 * x, c]));
                }
            }
        }
    }

    #[test]
    fn indivisible_dimensions_name_the_multiple() {
        let w = weights(8);
        let pair = ImagePair::new(image(1, 36, 32), image(2, 36, 32)).unwrap();
        let err = extract_features(&pair, &w, &[8], 32).unwrap_err();
        assert!(err.to_string().contains("multiple of 32"), "{err}");
    }

    #[test]
    fn positional_encoding_examples() {
        let p = positional_encoding::<f64>(8, 8, 32).unwrap();
        assert_eq!(p.at(&[0, 0, 0]), 0.0);
        // Same row: y-half is identical.
        for c in 0..16 {
            assert_eq!(p.at(&[3, 1, c]), p.at(&[3, 6, c]));
        }
        // Direct evaluation at (y=3, x=5).
        for c in 0..32 {
            let (pos, k) = if c < 16 { (3.0, c) } else { (5.0, c - 16) };
            let f = 1.0 / 10000f64.powf((2 * (k / 2)) as f64 / 16.0);
            let want = if k % 2 == 0 { (pos * f).sin() } else { (pos * f).cos() };
            assert!((p.at(&[3, 5, c]) - want).abs() < 1e-15);
        }
        assert!(p.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(p, positional_encoding::<f64>(8, 8, 32).unwrap());
        assert!(positional_encoding::<f64>(4, 4, 6).is_err());
    }
}
