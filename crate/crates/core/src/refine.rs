//! Flow propagation, warping, upsampling and the 1/4-scale refinement stage.

use gmflow_tensor::{Graph, Real, Tensor, Var};
use rand::Rng;

use crate::error::{FlowError, Result};
use crate::matching::{local_match, LocalWindow};
use crate::params::{fan_in_uniform, Bound, ParamStore};
use crate::transformer;
use crate::types::{FeatureMap, FlowField};

pub const UPSAMPLER_PREFIX: &str = "upsampler.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropagationConfig {
    /// Attention over the whole feature map.
    Global,
    /// Attention restricted to an odd `n×n` window.
    Local(usize),
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PropagationConfig::Local(n) if n < 3 || n % 2 == 0 => Err(FlowError::config(format!(
                "propagation window must be odd and at least 3, got {n}"
            ))),
            _ => Ok(()),
        }
    }
}

fn hw<T: Real>(g: &Graph<T>, v: Var, what: &str, channels: Option<usize>) -> Result<(usize, usize, usize)> {
    let s = g.shape(v);
    if s.len() != 3 || channels.is_some_and(|c| s[2] != c) {
        return Err(FlowError::config(format!("{what} has unexpected shape {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

/// Self-similarity propagation `softmax(F Fᵀ / √D) V` on `[H, W, D]`
/// features and an `[H, W, 2]` flow.
pub fn propagate<T: Real>(g: &mut Graph<T>, feature: Var, flow: Var, cfg: PropagationConfig) -> Result<Var> {
    cfg.validate()?;
    let (h, w, d) = hw(g, feature, "feature", None)?;
    let (fh, fw, _) = hw(g, flow, "flow", Some(2))?;
    if (fh, fw) != (h, w) {
        return Err(FlowError::config(format!(
            "flow grid {fh}x{fw} does not match feature grid {h}x{w}"
        )));
    }
    let f = g.reshape(feature, &[h * w, d])?;
    let v = g.reshape(flow, &[h * w, 2])?;
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let out = match cfg {
        PropagationConfig::Global => {
            let s = g.matmul_t(f, false, f, true)?;
            let s = g.scale(s, scale);
            let a = g.softmax(s, 1)?;
            g.matmul(a, v)?
        }
        PropagationConfig::Local(n) => {
            let window = LocalWindow::new(h, w, n / 2, None)?;
            let k = window.len();
            let s = g.local_correlation(f, f, window.candidates.clone(), k, scale)?;
            let a = g.masked_softmax(s, &window.keep)?;
            g.local_aggregate(a, v, window.candidates)?
        }
    };
    Ok(g.reshape(out, &[h, w, 2])?)
}

fn pixel_grid<T: Real>(h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(&[h, w, 2], |i| {
        T::from_usize(if i[2] == 0 { i[1] } else { i[0] }).unwrap()
    })
}

/// Samples an `[H, W, D]` feature at `p + flow(p)`; zero outside the grid.
pub fn warp_var<T: Real>(g: &mut Graph<T>, feature: Var, flow: Var) -> Result<Var> {
    let (h, w, _) = hw(g, feature, "feature", None)?;
    let (fh, fw, _) = hw(g, flow, "flow", Some(2))?;
    if (fh, fw) != (h, w) {
        return Err(FlowError::config(format!(
            "flow grid {fh}x{fw} does not match feature grid {h}x{w}"
        )));
    }
    let grid = g.constant(pixel_grid(h, w));
    let coords = g.add(grid, flow)?;
    let chw = g.permute(feature, &[2, 0, 1])?;
    let s = g.bilinear_sample(chw, coords)?;
    Ok(g.permute(s, &[1, 2, 0])?)
}

/// Bilinear upsampling of an `[H, W, 2]` flow by `factor` with half-pixel
/// alignment (sources clamped to the grid); values are multiplied by
/// `factor`.
pub fn upsample_bilinear<T: Real>(g: &mut Graph<T>, flow: Var, factor: usize) -> Result<Var> {
    let (h, w, _) = hw(g, flow, "flow", Some(2))?;
    if factor == 0 {
        return Err(FlowError::config("upsampling factor must be positive"));
    }
    let f = factor as f64;
    let src = |o: usize, n: usize| ((o as f64 + 0.5) / f - 0.5).clamp(0.0, (n - 1) as f64);
    let coords = Tensor::from_fn(&[h * factor, w * factor, 2], |i| {
        T::lit(if i[2] == 0 { src(i[1], w) } else { src(i[0], h) })
    });
    let coords = g.constant(coords);
    let chw = g.permute(flow, &[2, 0, 1])?;
    let s = g.bilinear_sample(chw, coords)?;
    let s = g.permute(s, &[1, 2, 0])?;
    Ok(g.scale(s, T::lit(f)))
}

pub fn init_upsampler<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, dim: usize, factor: usize, rng: &mut R) {
    let out = 9 * factor * factor;
    store.insert(
        format!("{UPSAMPLER_PREFIX}conv.w"),
        fan_in_uniform(&[dim, dim, 3, 3], dim * 9, 6.0, rng),
    );
    store.insert(format!("{UPSAMPLER_PREFIX}conv.b"), Tensor::zeros(&[dim]));
    // Small logits: combinations start near a uniform 3×3 average.
    store.insert(
        format!("{UPSAMPLER_PREFIX}mask.w"),
        fan_in_uniform(&[out, dim, 1, 1], dim, 0.1, rng),
    );
    store.insert(format!("{UPSAMPLER_PREFIX}mask.b"), Tensor::zeros(&[out]));
}

/// Upsampling factor implied by the stored mask head.
pub fn upsampler_factor<T: Real>(store: &ParamStore<T>) -> Option<usize> {
    let out = store.get(&format!("{UPSAMPLER_PREFIX}mask.b"))?.len();
    let f2 = out / 9;
    let f = (f2 as f64).sqrt().round() as usize;
    (f * f * 9 == out).then_some(f)
}

/// Per-pixel combination logits `[H·W·f², 9]` from an `[H, W, D]` feature.
/// Channel `(dy·f + dx)·9 + k` of the mask head holds neighbor `k` of
/// sub-pixel `(dy, dx)`.
pub fn upsample_logits<T: Real>(g: &mut Graph<T>, p: &Bound, feature: Var, factor: usize) -> Result<Var> {
    let (h, w, _) = hw(g, feature, "feature", None)?;
    let x = g.permute(feature, &[2, 0, 1])?;
    let cw = p.var(&format!("{UPSAMPLER_PREFIX}conv.w"))?;
    let cb = p.var(&format!("{UPSAMPLER_PREFIX}conv.b"))?;
    let x = g.conv2d(x, cw, Some(cb), 1, 1)?;
    let x = g.relu(x);
    let mw = p.var(&format!("{UPSAMPLER_PREFIX}mask.w"))?;
    let mb = p.var(&format!("{UPSAMPLER_PREFIX}mask.b"))?;
    let m = g.conv2d(x, mw, Some(mb), 1, 0)?;
    if g.shape(m)[0] != 9 * factor * factor {
        return Err(FlowError::config(format!(
            "upsampling head produces {} channels, factor {factor} needs {}",
            g.shape(m)[0],
            9 * factor * factor
        )));
    }
    let m = g.permute(m, &[1, 2, 0])?;
    Ok(g.reshape(m, &[h * w * factor * factor, 9])?)
}

/// Convex combination upsampling of an `[H, W, 2]` flow to
/// `[H·f, W·f, 2]`, with values multiplied by `f`.
pub fn convex_upsample_var<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    flow: Var,
    feature: Var,
    factor: usize,
) -> Result<Var> {
    let logits = upsample_logits(g, p, feature, factor)?;
    let weights = g.softmax(logits, 1)?;
    Ok(g.convex_combine(weights, flow, factor)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefineConfig {
    pub num_blocks: usize,
    pub splits: usize,
    pub radius: usize,
    pub propagation: PropagationConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            num_blocks: 6,
            splits: 8,
            radius: 4,
            propagation: PropagationConfig::Local(3),
        }
    }
}

/// Output of the refinement stage.
pub struct Refined {
    /// Refined 1/4 flow after propagation.
    pub flow: Var,
    /// Enhanced 1/4 frame-1 feature, input of the upsampling head.
    pub feature: Var,
}

/// Residual refinement at 1/4 scale with the shared transformer.
pub fn refine_var<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    f1: Var,
    f2: Var,
    coarse: Var,
    pos: &Tensor<T>,
    cfg: &RefineConfig,
) -> Result<Refined> {
    let up = upsample_bilinear(g, coarse, 2)?;
    let (h, w, _) = hw(g, f1, "feature", None)?;
    if g.shape(up)[..2] != [h, w] {
        return Err(FlowError::config(format!(
            "coarse flow {:?} is not half of the {h}x{w} refinement grid",
            g.shape(coarse)
        )));
    }
    let f2w = warp_var(g, f2, up)?;
    let (e1, e2) = transformer::enhance(g, p, f1, f2w, pos, cfg.num_blocks, cfg.splits)?;
    let window = LocalWindow::new(h, w, cfg.radius, None)?;
    let residual = local_match(g, e1, e2, &window)?;
    let v = g.add(up, residual)?;
    let flow = propagate(g, e1, v, cfg.propagation)?;
    Ok(Refined { flow, feature: e1 })
}

fn eager<T: Real>(f: impl FnOnce(&mut Graph<T>) -> Result<Var>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.value(v).clone())
}

pub fn propagate_flow<T: Real>(
    feature: &FeatureMap<T>,
    flow: &FlowField<T>,
    cfg: PropagationConfig,
) -> Result<FlowField<T>> {
    let out = eager(|g| {
        let f = g.constant(feature.data.clone());
        let v = g.constant(flow.data.clone());
        propagate(g, f, v, cfg)
    })?;
    FlowField::new(out, flow.scale)
}

pub fn warp<T: Real>(feature: &FeatureMap<T>, flow: &FlowField<T>) -> Result<FeatureMap<T>> {
    let out = eager(|g| {
        let f = g.constant(feature.data.clone());
        let v = g.constant(flow.data.clone());
        warp_var(g, f, v)
    })?;
    FeatureMap::new(out, feature.scale)
}

pub fn upsample_flow<T: Real>(flow: &FlowField<T>, factor: usize) -> Result<FlowField<T>> {
    let out = eager(|g| {
        let v = g.constant(flow.data.clone());
        upsample_bilinear(g, v, factor)
    })?;
    FlowField::new(out, (flow.scale / factor).max(1))
}

pub fn upsample_flow_2x<T: Real>(flow: &FlowField<T>) -> Result<FlowField<T>> {
    upsample_flow(flow, 2)
}

pub fn convex_upsample<T: Real>(
    flow: &FlowField<T>,
    feature: &FeatureMap<T>,
    weights: &ParamStore<T>,
    factor: usize,
) -> Result<FlowField<T>> {
    let out = eager(|g| {
        let p = weights.bind(g, false);
        let v = g.constant(flow.data.clone());
        let f = g.constant(feature.data.clone());
        convex_upsample_var(g, &p, v, f, factor)
    })?;
    FlowField::new(out, (flow.scale / factor).max(1))
}

/// Eager refinement: returns the refined 1/4 flow.
pub fn refine<T: Real>(
    f1: &FeatureMap<T>,
    f2: &FeatureMap<T>,
    coarse: &FlowField<T>,
    weights: &ParamStore<T>,
    cfg: &RefineConfig,
) -> Result<FlowField<T>> {
    let pos = crate::backbone::positional_encoding(f1.height(), f1.width(), f1.dim())?;
    let out = eager(|g| {
        let p = weights.bind(g, false);
        let a = g.constant(f1.data.clone());
        let b = g.constant(f2.data.clone());
        let c = g.constant(coarse.data.clone());
        Ok(refine_var(g, &p, a, b, c, &pos, cfg)?.flow)
    })?;
    FlowField::new(out, f1.scale)
}
