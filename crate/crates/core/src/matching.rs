//! Correspondence by softmax matching.
//!
//! Global matching compares every pixel of frame 1 with every pixel of
//! frame 2 through a `[H·W, H·W]` correlation matrix, turns each row into a
//! distribution with a softmax, and reads the flow off as the expected target
//! coordinate minus the source coordinate. Local matching does the same over
//! a `(2r+1)²` window around an initial estimate.

use std::cell::Cell;
use std::sync::Arc;

use gmflow_tensor::{Graph, Real, Tensor, Var};

use crate::error::{FlowError, Result};
use crate::types::{FeatureMap, FlowField, OcclusionMask};

/// Default forward-backward consistency constants.
pub const OCCLUSION_ALPHA: f64 = 0.01;
pub const OCCLUSION_BETA: f64 = 0.5;

thread_local! {
    static INVERTED: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with the flow sign of global matching flipped on this thread.
/// Exists so the self-test can prove it detects a broken matching layer.
#[doc(hidden)]
pub fn with_inverted_matching<R>(f: impl FnOnce() -> R) -> R {
    struct Reset(bool);
    impl Drop for Reset {
        fn drop(&mut self) {
            INVERTED.with(|c| c.set(self.0));
        }
    }
    let _reset = Reset(INVERTED.with(|c| c.replace(true)));
    f()
}

fn inverted() -> bool {
    INVERTED.with(Cell::get)
}

/// `[H·W, 2]` pixel coordinates `(x, y)` in row-major order.
pub fn coordinate_grid<T: Real>(height: usize, width: usize) -> Tensor<T> {
    Tensor::from_fn(&[height * width, 2], |i| {
        let p = i[0];
        T::from_usize(if i[1] == 0 { p % width } else { p / width }).unwrap()
    })
}

fn flatten<T: Real>(g: &mut Graph<T>, f: Var) -> Result<(Var, [usize; 3])> {
    let s = g.shape(f).to_vec();
    if s.len() != 3 {
        return Err(FlowError::config(format!("features must be [H, W, D], got {s:?}")));
    }
    Ok((g.reshape(f, &[s[0] * s[1], s[2]])?, [s[0], s[1], s[2]]))
}

fn check_pair<T: Real>(g: &Graph<T>, f1: Var, f2: Var) -> Result<()> {
    if g.shape(f1) != g.shape(f2) {
        return Err(gmflow_tensor::TensorError::ShapeMismatch {
            op: "global_correlation",
            lhs: g.shape(f1).to_vec(),
            rhs: g.shape(f2).to_vec(),
        }
        .into());
    }
    Ok(())
}

/// `C = F1 F2ᵀ / √D` on `[H, W, D]` features, as `[H·W, H·W]`.
pub fn correlation<T: Real>(g: &mut Graph<T>, f1: Var, f2: Var) -> Result<Var> {
    check_pair(g, f1, f2)?;
    let (a, [_, _, d]) = flatten(g, f1)?;
    let (b, _) = flatten(g, f2)?;
    let c = g.matmul_t(a, false, b, true)?;
    Ok(g.scale(c, T::one() / T::from_usize(d).unwrap().sqrt()))
}

/// Softmax over each correlation row, then expected target coordinate minus
/// source coordinate. `rows` is the source pixel range of `corr`; the target
/// grid is `height × width`.
pub fn flow_from_correlation<T: Real>(
    g: &mut Graph<T>,
    corr: Var,
    rows: std::ops::Range<usize>,
    height: usize,
    width: usize,
) -> Result<Var> {
    let m = g.softmax(corr, 1)?;
    let grid = coordinate_grid::<T>(height, width);
    let target = g.constant(grid.clone());
    let expected = g.matmul(m, target)?;
    let src = Tensor::new(&[rows.len(), 2], grid.data()[rows.start * 2..rows.end * 2].to_vec())?;
    let src = g.constant(src);
    Ok(if inverted() {
        g.sub(src, expected)?
    } else {
        g.sub(expected, src)?
    })
}

/// Global matching flow `[H, W, 2]` from `[H, W, D]` features. Also returns
/// the correlation node so a backward flow can reuse it.
pub fn global_match<T: Real>(g: &mut Graph<T>, f1: Var, f2: Var) -> Result<(Var, Var)> {
    let corr = correlation(g, f1, f2)?;
    let (h, w) = (g.shape(f1)[0], g.shape(f1)[1]);
    let flow = flow_from_correlation(g, corr, 0..h * w, h, w)?;
    Ok((g.reshape(flow, &[h, w, 2])?, corr))
}

/// Backward flow (frame 2 to frame 1) from a forward correlation node.
pub fn backward_from_correlation<T: Real>(g: &mut Graph<T>, corr: Var, height: usize, width: usize) -> Result<Var> {
    let ct = g.transpose(corr)?;
    let flow = flow_from_correlation(g, ct, 0..height * width, height, width)?;
    Ok(g.reshape(flow, &[height, width, 2])?)
}

/// Round half away from zero.
fn round_away(v: f64) -> i64 {
    v.round() as i64
}

/// Candidate table for local matching: index into frame-2 pixels for every
/// `(pixel, candidate)`, plus the rounded center offset `c − p` per pixel.
/// Candidate `k = (dy + r)(2r + 1) + (dx + r)`.
pub struct LocalWindow {
    pub radius: usize,
    pub candidates: Arc<[Option<usize>]>,
    pub keep: Vec<bool>,
    pub center_offset: Vec<[f64; 2]>,
}

impl LocalWindow {
    pub fn new(height: usize, width: usize, radius: usize, init: Option<&[f64]>) -> Result<Self> {
        let side = 2 * radius + 1;
        if radius == 0 || side > height || side > width {
            return Err(FlowError::config(format!(
                "local matching radius {radius} gives a {side}x{side} window that does not fit a {height}x{width} grid"
            )));
        }
        let n = height * width;
        if let Some(init) = init {
            if init.len() != n * 2 {
                return Err(FlowError::config("initial flow does not match the feature grid"));
            }
        }
        let k = side * side;
        let r = radius as i64;
        let mut candidates = Vec::with_capacity(n * k);
        let mut center_offset = Vec::with_capacity(n);
        for p in 0..n {
            let (py, px) = ((p / width) as i64, (p % width) as i64);
            let (ou, ov) = match init {
                Some(f) => (round_away(f[2 * p]), round_away(f[2 * p + 1])),
                None => (0, 0),
            };
            center_offset.push([ou as f64, ov as f64]);
            let (cx, cy) = (px + ou, py + ov);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (x, y) = (cx + dx, cy + dy);
                    let inside = x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height;
                    candidates.push(inside.then(|| y as usize * width + x as usize));
                }
            }
        }
        let keep = candidates.iter().map(Option::is_some).collect();
        Ok(Self {
            radius,
            candidates: candidates.into(),
            keep,
            center_offset,
        })
    }

    pub fn len(&self) -> usize {
        (2 * self.radius + 1).pow(2)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `[k, 2]` candidate offsets `(dx, dy)` relative to the center.
    pub fn offsets<T: Real>(&self) -> Tensor<T> {
        let side = 2 * self.radius + 1;
        let r = self.radius as f64;
        Tensor::from_fn(&[side * side, 2], |i| {
            let (dy, dx) = ((i[0] / side) as f64 - r, (i[0] % side) as f64 - r);
            T::lit(if i[1] == 0 { dx } else { dy })
        })
    }
}

/// Local matching flow `[H, W, 2]`: softmax over the window around
/// `p + round(init)`, output `(c − p) + E[offset]`. Pixels whose whole window
/// falls outside the grid keep the rounded initial flow.
pub fn local_match<T: Real>(g: &mut Graph<T>, f1: Var, f2: Var, window: &LocalWindow) -> Result<Var> {
    check_pair(g, f1, f2)?;
    let (a, [h, w, d]) = flatten(g, f1)?;
    let (b, _) = flatten(g, f2)?;
    let k = window.len();
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let corr = g.local_correlation(a, b, window.candidates.clone(), k, scale)?;
    let prob = g.masked_softmax(corr, &window.keep)?;
    let offsets = g.constant(window.offsets());
    let residual = g.matmul(prob, offsets)?;
    let centers = Tensor::new(
        &[h * w, 2],
        window.center_offset.iter().flatten().map(|&v| T::lit(v)).collect(),
    )?;
    let centers = g.constant(centers);
    let flow = g.add(residual, centers)?;
    Ok(g.reshape(flow, &[h, w, 2])?)
}

/// Flattened correlation matrix of one feature pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationVolume<T> {
    /// `[H·W, H·W]`, already divided by `√D`.
    pub data: Tensor<T>,
    pub height: usize,
    pub width: usize,
    pub scale: usize,
}

impl<T: Real> CorrelationVolume<T> {
    pub fn transpose(&self) -> Result<Self> {
        let mut g = Graph::new();
        let c = g.constant(self.data.clone());
        let t = g.transpose(c)?;
        Ok(Self {
            data: g.value(t).clone(),
            ..*self
        })
    }
}

/// Row-stochastic `[H·W, H·W]` matching distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingDistribution<T> {
    pub data: Tensor<T>,
    pub height: usize,
    pub width: usize,
    pub scale: usize,
}

pub fn global_correlation<T: Real>(f1: &FeatureMap<T>, f2: &FeatureMap<T>) -> Result<CorrelationVolume<T>> {
    let mut g = Graph::new();
    let a = g.constant(f1.data.clone());
    let b = g.constant(f2.data.clone());
    let c = correlation(&mut g, a, b)?;
    Ok(CorrelationVolume {
        data: g.value(c).clone(),
        height: f1.height(),
        width: f1.width(),
        scale: f1.scale,
    })
}

pub fn softmax_matching<T: Real>(c: &CorrelationVolume<T>) -> Result<MatchingDistribution<T>> {
    let mut g = Graph::new();
    let v = g.constant(c.data.clone());
    let m = g.softmax(v, 1)?;
    Ok(MatchingDistribution {
        data: g.value(m).clone(),
        height: c.height,
        width: c.width,
        scale: c.scale,
    })
}

/// `V = M·G − G`.
pub fn flow_from_matching<T: Real>(m: &MatchingDistribution<T>) -> Result<FlowField<T>> {
    let n = m.height * m.width;
    if m.data.shape() != [n, n] {
        return Err(FlowError::config(format!(
            "matching distribution {:?} does not fit a {}x{} grid",
            m.data.shape(),
            m.height,
            m.width
        )));
    }
    let mut g = Graph::new();
    let mv = g.constant(m.data.clone());
    let grid = g.constant(coordinate_grid(m.height, m.width));
    let expected = g.matmul(mv, grid)?;
    let flow = if inverted() {
        g.sub(grid, expected)?
    } else {
        g.sub(expected, grid)?
    };
    FlowField::new(g.value(flow).clone().reshape(&[m.height, m.width, 2])?, m.scale)
}

/// Correlation, softmax and expectation in one pass.
pub fn softmax_flow<T: Real>(f1: &FeatureMap<T>, f2: &FeatureMap<T>) -> Result<FlowField<T>> {
    let mut g = Graph::new();
    let a = g.constant(f1.data.clone());
    let b = g.constant(f2.data.clone());
    let (flow, _) = global_match(&mut g, a, b)?;
    FlowField::new(g.value(flow).clone(), f1.scale)
}

/// Backward flow from the transposed forward correlation.
pub fn backward_flow_from_transpose<T: Real>(c: &CorrelationVolume<T>) -> Result<FlowField<T>> {
    flow_from_matching(&softmax_matching(&c.transpose()?)?)
}

pub fn local_matching<T: Real>(
    f1: &FeatureMap<T>,
    f2: &FeatureMap<T>,
    radius: usize,
    init: &FlowField<T>,
) -> Result<FlowField<T>> {
    if init.height() != f1.height() || init.width() != f1.width() {
        return Err(FlowError::config(format!(
            "initial flow {}x{} does not match features {}x{}",
            init.height(),
            init.width(),
            f1.height(),
            f1.width()
        )));
    }
    let init64: Vec<f64> = init.data.data().iter().map(|v| v.to_f64().unwrap()).collect();
    let window = LocalWindow::new(f1.height(), f1.width(), radius, Some(&init64))?;
    let mut g = Graph::new();
    let a = g.constant(f1.data.clone());
    let b = g.constant(f2.data.clone());
    let flow = local_match(&mut g, a, b, &window)?;
    FlowField::new(g.value(flow).clone(), f1.scale)
}

/// Global matching computed over `splits²` groups of source pixels, bounding
/// the correlation memory to one group's rows at a time. The last group
/// absorbs any remainder.
pub fn chunked_global_matching<T: Real>(f1: &FeatureMap<T>, f2: &FeatureMap<T>, splits: usize) -> Result<FlowField<T>> {
    if splits == 0 {
        return Err(FlowError::config("chunk splits must be at least 1"));
    }
    if f1.data.shape() != f2.data.shape() {
        return Err(gmflow_tensor::TensorError::ShapeMismatch {
            op: "chunked_global_matching",
            lhs: f1.data.shape().to_vec(),
            rhs: f2.data.shape().to_vec(),
        }
        .into());
    }
    let (h, w, d) = (f1.height(), f1.width(), f1.dim());
    let n = h * w;
    let groups = (splits * splits).min(n);
    let per = n / groups;
    let mut out = Vec::with_capacity(n * 2);
    let mut g = Graph::new();
    let a = g.constant(f1.data.clone().reshape(&[n, d])?);
    let b = g.constant(f2.data.clone().reshape(&[n, d])?);
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    for i in 0..groups {
        let start = i * per;
        let end = if i + 1 == groups { n } else { start + per };
        let mark = g.len();
        let rows = g.slice_rows(a, start, end)?;
        let c = g.matmul_t(rows, false, b, true)?;
        let c = g.scale(c, scale);
        let flow = flow_from_correlation(&mut g, c, start..end, h, w)?;
        out.extend_from_slice(g.value(flow).data());
        // Drop this group's intermediates before the next one.
        g.truncate(mark);
    }
    FlowField::new(Tensor::new(&[h, w, 2], out)?, f1.scale)
}

/// Forward-backward consistency: `p` is occluded iff
/// `|f(p) + b(p + f(p))|² > α(|f(p)|² + |b(p + f(p))|²) + β`, where `b` is
/// sampled bilinearly.
pub fn occlusion_from_fb_check<T: Real>(
    forward: &FlowField<T>,
    backward: &FlowField<T>,
    alpha: f64,
    beta: f64,
) -> Result<OcclusionMask> {
    if forward.data.shape() != backward.data.shape() {
        return Err(FlowError::config(format!(
            "flow fields differ in size: {:?} vs {:?}",
            forward.data.shape(),
            backward.data.shape()
        )));
    }
    let (h, w) = (forward.height(), forward.width());
    let mut g = Graph::new();
    let bwd = g.constant(backward.data.clone());
    let bwd = g.permute(bwd, &[2, 0, 1])?;
    let coords = Tensor::from_fn(&[h, w, 2], |i| {
        let base = if i[2] == 0 { i[1] } else { i[0] };
        T::from_usize(base).unwrap() + forward.data.at(i)
    });
    let coords = g.constant(coords);
    let sampled = g.bilinear_sample(bwd, coords)?;
    let s = g.value(sampled);
    let data = (0..h * w)
        .map(|p| {
            let (fu, fv) = forward.at(p / w, p % w);
            let (fu, fv) = (fu.to_f64().unwrap(), fv.to_f64().unwrap());
            let (bu, bv) = (s.data()[p].to_f64().unwrap(), s.data()[h * w + p].to_f64().unwrap());
            let lhs = (fu + bu).powi(2) + (fv + bv).powi(2);
            let rhs = alpha * (fu * fu + fv * fv + bu * bu + bv * bv) + beta;
            lhs > rhs
        })
        .collect();
    OcclusionMask::new(h, w, data)
}
