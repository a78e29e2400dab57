//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and whatever it
//! saved for the backward pass. Nodes are only ever appended, so the node
//! list is already in topological order and [`Graph::backward`] can walk it
//! in reverse.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, bilinear_tap, ConvGeom};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        ta: bool,
        b: Var,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax {
        x: Var,
        axis: usize,
    },
    MaskedSoftmax(Var),
    Relu(Var),
    Gelu(Var),
    Abs(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Bilinear {
        feat: Var,
        coords: Var,
    },
    GatherRows {
        x: Var,
        idx: Arc<[usize]>,
    },
    ConcatRows(Vec<Var>),
    Sum(Var),
    LocalCorrelation {
        f1: Var,
        f2: Var,
        idx: Arc<[Option<usize>]>,
        k: usize,
        scale: T,
    },
    LocalAggregate {
        p: Var,
        v: Var,
        idx: Arc<[Option<usize>]>,
        k: usize,
    },
    ConvexCombine {
        w: Var,
        flow: Var,
        factor: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Tape of operations for one forward pass.
///
/// A graph supports exactly one [`backward`](Graph::backward) call; building
/// a new graph is the way to run another forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn param_err(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidParameter {
        op,
        reason: reason.into(),
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn softmax_slices<T: Real>(data: &mut [T], outer: usize, len: usize, inner: usize, keep: Option<&[bool]>) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let kept = |j: usize| keep.map_or(true, |m| m[at(j)]);
            let mut max = T::neg_infinity();
            for j in 0..len {
                if kept(j) {
                    max = max.max(data[at(j)]);
                }
            }
            if max == T::neg_infinity() {
                // Fully masked slice: no candidates, all-zero distribution.
                for j in 0..len {
                    data[at(j)] = T::zero();
                }
                continue;
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = if kept(j) { (data[at(j)] - max).exp() } else { T::zero() };
                data[at(j)] = e;
                total = total + e;
            }
            for j in 0..len {
                data[at(j)] = data[at(j)] / total;
            }
        }
    }
}

fn softmax_backward<T: Real>(y: &[T], g: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot = dot + y[at(j)] * g[at(j)];
            }
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    dx
}

fn permute_data<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for ax in (0..rank.saturating_sub(1)).rev() {
        in_strides[ax] = in_strides[ax + 1] * shape[ax + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.len();
    let src = x.data();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        data.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, data)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created at or after `len`. Handles to dropped nodes
    /// become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Inserts a tensor; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    /// Inserts a trainable parameter.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Inserts a tensor that is never differentiated.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(op, va.shape(), vb.shape()));
        }
        let out = zip_map(va, vb, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, make(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Adds `bias` (shape `[C]`) along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = *vx.shape().last().unwrap_or(&1);
        if vb.shape() != [c] {
            return Err(mismatch("add_bias", vx.shape(), vb.shape()));
        }
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i % c])
            .collect();
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            m,
            ka,
            n,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a,
                ta,
                b,
                tb,
                m,
                k: ka,
                n,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(param_err("transpose", "expected a rank-2 tensor"));
        }
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out.with_requires_grad(false), Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(param_err(
                "permute",
                format!("{axes:?} is not a permutation of rank {rank}"),
            ));
        }
        let out = permute_data(self.value(x), axes);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Permute(x, axes.to_vec()), rg))
    }

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        (
            shape[..axis].iter().product(),
            shape[axis],
            shape[axis + 1..].iter().product(),
        )
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let rank = v.rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank,
            });
        }
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let (outer, len, inner) = Self::axis_split(v.shape(), axis);
        let mut out = v.clone().with_requires_grad(false);
        softmax_slices(out.data_mut(), outer, len, inner, None);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Softmax along the last axis over the entries where `keep` is true.
    /// Excluded entries get probability exactly zero; a slice with no kept
    /// entry becomes all zeros.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let v = self.value(x);
        if keep.len() != v.len() || v.rank() == 0 {
            return Err(param_err("masked_softmax", "mask length must match the input"));
        }
        if v.data().iter().zip(keep).any(|(val, &k)| k && !val.is_finite()) {
            return Err(TensorError::NonFinite { op: "masked_softmax" });
        }
        let len = *v.shape().last().unwrap();
        let mut out = v.clone().with_requires_grad(false);
        softmax_slices(out.data_mut(), v.len() / len, len, 1, Some(keep));
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaskedSoftmax(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero())).with_requires_grad(false);
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu).with_requires_grad(false);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs()).with_requires_grad(false);
        let rg = self.rg(x);
        self.push(out, Op::Abs(x), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = *vx
            .shape()
            .last()
            .ok_or_else(|| param_err("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", vx.shape(), self.shape(gamma)));
        }
        let rows = vx.len() / d;
        let dt = T::from_usize(d).unwrap();
        let eps = T::lit(eps);
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.len()];
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gv[j] + bv[j];
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// 2-D convolution of a `[C, H, W]` input with an `[O, C, kh, kw]`
    /// kernel and optional `[O]` bias, zero padded.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(param_err("conv2d", "stride must be positive"));
        }
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(param_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(mismatch("conv2d bias", &sw, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let plane = geom.ho * geom.wo;
        let mut out = vec![T::zero(); o * plane];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (oc, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv[oc]);
            }
        }
        kernels::gemm(
            self.value(weight).data(),
            false,
            &cols,
            false,
            o,
            geom.cols_rows(),
            plane,
            &mut out,
            bias.is_some(),
        );
        let rg = self.rg(x) || self.rg(weight) || bias.map_or(false, |b| self.rg(b));
        let out = Tensor::from_parts(vec![o, geom.ho, geom.wo], out);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w: weight,
                bias,
                geom,
                // Only the weight gradient reads the columns.
                cols: if self.rg(weight) { cols } else { Vec::new() },
            },
            rg,
        ))
    }

    /// Bilinear sampling of a `[C, H, W]` feature at `[H', W', 2]` pixel
    /// coordinates `(x, y)`. Samples strictly outside `[0, W−1]×[0, H−1]`
    /// read as zero.
    pub fn bilinear_sample(&mut self, feature: Var, coords: Var) -> Result<Var> {
        let (sf, sc) = (self.shape(feature).to_vec(), self.shape(coords).to_vec());
        if sf.len() != 3 || sc.len() != 3 || sc[2] != 2 {
            return Err(mismatch("bilinear_sample", &sf, &sc));
        }
        let (c, h, w) = (sf[0], sf[1], sf[2]);
        let n = sc[0] * sc[1];
        let fv = self.value(feature).data();
        let cv = self.value(coords).data();
        let mut out = vec![T::zero(); c * n];
        for p in 0..n {
            if let Some(tap) = bilinear_tap(cv[2 * p], cv[2 * p + 1], h, w) {
                let wts = tap.weights();
                for ch in 0..c {
                    let v = tap.corners(&fv[ch * h * w..(ch + 1) * h * w], w);
                    out[ch * n + p] = wts[0] * v[0] + wts[1] * v[1] + wts[2] * v[2] + wts[3] * v[3];
                }
            }
        }
        let rg = self.rg(feature) || self.rg(coords);
        Ok(self.push(
            Tensor::from_parts(vec![c, sc[0], sc[1]], out),
            Op::Bilinear { feat: feature, coords },
            rg,
        ))
    }

    /// Selects rows of a rank-2 tensor: `out[i] = x[idx[i]]`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(param_err("gather_rows", "expected a rank-2 tensor"));
        }
        let d = sx[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= sx[0]) {
            return Err(param_err(
                "gather_rows",
                format!("row {bad} out of range for {} rows", sx[0]),
            ));
        }
        if idx.is_empty() {
            return Err(param_err("gather_rows", "empty index list"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), d], out),
            Op::GatherRows { x, idx },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Arc<[usize]> = (start..end).collect();
        self.gather_rows(x, idx)
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| param_err("concat_rows", "no inputs"))?;
        let d = self.shape(*first).get(1).copied().unwrap_or(0);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != d {
                return Err(mismatch("concat_rows", self.shape(*first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, d], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Sparse correlation: `out[n, j] = scale·⟨f1[n], f2[idx[n·k + j]]⟩`, zero
    /// where the candidate is `None`.
    pub fn local_correlation(
        &mut self,
        f1: Var,
        f2: Var,
        idx: Arc<[Option<usize>]>,
        k: usize,
        scale: T,
    ) -> Result<Var> {
        let (s1, s2) = (self.shape(f1).to_vec(), self.shape(f2).to_vec());
        if s1.len() != 2 || s2.len() != 2 || s1[1] != s2[1] {
            return Err(mismatch("local_correlation", &s1, &s2));
        }
        let (n, d) = (s1[0], s1[1]);
        if idx.len() != n * k || idx.iter().flatten().any(|&i| i >= s2[0]) {
            return Err(param_err(
                "local_correlation",
                "candidate table does not fit the inputs",
            ));
        }
        let (a, b) = (self.value(f1).data(), self.value(f2).data());
        let mut out = vec![T::zero(); n * k];
        for p in 0..n {
            let row = &a[p * d..(p + 1) * d];
            for j in 0..k {
                if let Some(q) = idx[p * k + j] {
                    let other = &b[q * d..(q + 1) * d];
                    let dot: T = row.iter().zip(other).map(|(&u, &v)| u * v).sum();
                    out[p * k + j] = dot * scale;
                }
            }
        }
        let rg = self.rg(f1) || self.rg(f2);
        Ok(self.push(
            Tensor::from_parts(vec![n, k], out),
            Op::LocalCorrelation { f1, f2, idx, k, scale },
            rg,
        ))
    }

    /// Sparse weighted sum: `out[n] = Σ_j p[n, j] · v[idx[n·k + j]]`.
    pub fn local_aggregate(&mut self, p: Var, v: Var, idx: Arc<[Option<usize>]>) -> Result<Var> {
        let (sp, sv) = (self.shape(p).to_vec(), self.shape(v).to_vec());
        if sp.len() != 2 || sv.len() != 2 {
            return Err(mismatch("local_aggregate", &sp, &sv));
        }
        let (n, k) = (sp[0], sp[1]);
        let c = sv[1];
        if idx.len() != n * k || idx.iter().flatten().any(|&i| i >= sv[0]) {
            return Err(param_err("local_aggregate", "candidate table does not fit the inputs"));
        }
        let (pv, vv) = (self.value(p).data(), self.value(v).data());
        let mut out = vec![T::zero(); n * c];
        for r in 0..n {
            for j in 0..k {
                if let Some(q) = idx[r * k + j] {
                    let w = pv[r * k + j];
                    for ch in 0..c {
                        out[r * c + ch] = out[r * c + ch] + w * vv[q * c + ch];
                    }
                }
            }
        }
        let rg = self.rg(p) || self.rg(v);
        Ok(self.push(
            Tensor::from_parts(vec![n, c], out),
            Op::LocalAggregate { p, v, idx, k },
            rg,
        ))
    }

    /// Convex upsampling by `factor`: each fine pixel is a weighted sum of the
    /// 3×3 coarse neighborhood (edge-replicated) of its parent, scaled by
    /// `factor`. `weights` is `[H·W·factor², 9]` ordered
    /// (row, column, sub-row, sub-column); `field` is `[H, W, C]`.
    pub fn convex_combine(&mut self, weights: Var, field: Var, factor: usize) -> Result<Var> {
        let (sw, sf) = (self.shape(weights).to_vec(), self.shape(field).to_vec());
        if factor == 0 {
            return Err(param_err("convex_combine", "factor must be positive"));
        }
        if sf.len() != 3 || sw != [sf[0] * sf[1] * factor * factor, 9] {
            return Err(mismatch("convex_combine", &sw, &sf));
        }
        let (h, w, c) = (sf[0], sf[1], sf[2]);
        let (wv, fv) = (self.value(weights).data(), self.value(field).data());
        let scale = T::from_usize(factor).unwrap();
        let (fh, fw) = (h * factor, w * factor);
        let mut out = vec![T::zero(); fh * fw * c];
        for_each_convex_tap(h, w, factor, |row, fine, k, src| {
            let wt = wv[row * 9 + k] * scale;
            for ch in 0..c {
                out[fine * c + ch] = out[fine * c + ch] + wt * fv[src * c + ch];
            }
        });
        let rg = self.rg(weights) || self.rg(field);
        Ok(self.push(
            Tensor::from_parts(vec![fh, fw, c], out),
            Op::ConvexCombine {
                w: weights,
                flow: field,
                factor,
            },
            rg,
        ))
    }

    /// Runs reverse-mode differentiation from the scalar `loss`.
    ///
    /// Every leaf created with `requires_grad` receives a gradient of its own
    /// shape (zeros when it does not influence the loss).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::StaleGraph);
        }
        let ls = self.shape(loss);
        if numel(ls) != 1 || !ls.is_empty() && ls.iter().any(|&d| d != 1) {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        self.consumed = true;
        let is_leaf: Vec<bool> = self.nodes.iter().map(|n| matches!(n.op, Op::Leaf)).collect();

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || is_leaf[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, g, &mut grads);
            // Saved buffers are dead once the node has been visited.
            self.nodes[i].op = Op::Leaf;
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if is_leaf[i] && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, delta: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e = *e + *d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, zip_map(&g, val(*b), |x, y| x * y));
                acc(*b, zip_map(&g, val(*a), |x, y| x * y));
            }
            Op::AddBias(x, b) => {
                let c = val(*b).len();
                let mut gb = vec![T::zero(); c];
                for (j, &v) in g.data().iter().enumerate() {
                    gb[j % c] = gb[j % c] + v;
                }
                acc(*b, Tensor::from_parts(vec![c], gb));
                acc(*x, g);
            }
            Op::Scale(x, f) => acc(*x, g.map(|v| v * *f)),
            Op::MatMul { a, ta, b, tb, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    if *ta {
                        // A stored k×m: dA = op(B) · dCᵀ
                        kernels::gemm(val(*b).data(), *tb, g.data(), true, k, n, m, &mut ga, false);
                    } else {
                        // dA = dC · op(B)ᵀ
                        kernels::gemm(g.data(), false, val(*b).data(), !*tb, m, n, k, &mut ga, false);
                    }
                    acc(*a, Tensor::from_parts(val(*a).shape().to_vec(), ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    if *tb {
                        // B stored n×k: dB = dCᵀ · op(A)
                        kernels::gemm(g.data(), true, val(*a).data(), *ta, n, m, k, &mut gb, false);
                    } else {
                        // dB = op(A)ᵀ · dC
                        kernels::gemm(val(*a).data(), !*ta, g.data(), false, k, m, n, &mut gb, false);
                    }
                    acc(*b, Tensor::from_parts(val(*b).shape().to_vec(), gb));
                }
            }
            Op::Reshape(x) => {
                let shape = val(*x).shape().to_vec();
                acc(*x, Tensor::from_parts(shape, g.into_data()));
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                acc(*x, permute_data(&g, &inverse));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = Self::axis_split(node.value.shape(), *axis);
                let dx = softmax_backward(node.value.data(), g.data(), outer, len, inner);
                acc(*x, Tensor::from_parts(node.value.shape().to_vec(), dx));
            }
            Op::MaskedSoftmax(x) => {
                let len = *node.value.shape().last().unwrap();
                let dx = softmax_backward(node.value.data(), g.data(), node.value.len() / len, len, 1);
                acc(*x, Tensor::from_parts(node.value.shape().to_vec(), dx));
            }
            Op::Relu(x) => acc(
                *x,
                zip_map(&g, val(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() }),
            ),
            Op::Gelu(x) => acc(*x, zip_map(&g, val(*x), |gv, xv| gv * gelu_grad(xv))),
            Op::Abs(x) => acc(
                *x,
                zip_map(&g, val(*x), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*gamma).len();
                let gv = val(*gamma).data();
                let rows = rstd.len();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); g.len()];
                let dt = T::from_usize(d).unwrap();
                for r in 0..rows {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..d {
                        dgamma[j] = dgamma[j] + gr[j] * xr[j];
                        dbeta[j] = dbeta[j] + gr[j];
                        let dxh = gr[j] * gv[j];
                        mean_dxh = mean_dxh + dxh;
                        mean_dxh_xh = mean_dxh_xh + dxh * xr[j];
                    }
                    mean_dxh = mean_dxh / dt;
                    mean_dxh_xh = mean_dxh_xh / dt;
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        dx[r * d + j] = rstd[r] * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                    }
                }
                acc(*gamma, Tensor::from_parts(vec![d], dgamma));
                acc(*beta, Tensor::from_parts(vec![d], dbeta));
                acc(*x, Tensor::from_parts(node.value.shape().to_vec(), dx));
            }
            Op::Conv2d { x, w, bias, geom, cols } => {
                let o = val(*w).shape()[0];
                let plane = geom.ho * geom.wo;
                let rows = geom.cols_rows();
                if let Some(b) = bias {
                    let gb = g.data().chunks(plane).map(|c| c.iter().copied().sum()).collect();
                    acc(*b, Tensor::from_parts(vec![o], gb));
                }
                if self.rg(*w) {
                    let mut gw = vec![T::zero(); o * rows];
                    kernels::gemm(g.data(), false, cols, true, o, plane, rows, &mut gw, false);
                    acc(*w, Tensor::from_parts(val(*w).shape().to_vec(), gw));
                }
                if self.rg(*x) {
                    let mut gcols = vec![T::zero(); rows * plane];
                    kernels::gemm(val(*w).data(), true, g.data(), false, rows, o, plane, &mut gcols, false);
                    let mut gx = vec![T::zero(); geom.c * geom.h * geom.w];
                    kernels::col2im(&gcols, geom, &mut gx);
                    acc(*x, Tensor::from_parts(val(*x).shape().to_vec(), gx));
                }
            }
            Op::Bilinear { feat, coords } => {
                let sf = val(*feat).shape();
                let (c, h, w) = (sf[0], sf[1], sf[2]);
                let cv = val(*coords).data();
                let n = cv.len() / 2;
                let fv = val(*feat).data();
                let mut gf = vec![T::zero(); fv.len()];
                let mut gc = vec![T::zero(); cv.len()];
                let one = T::one();
                for p in 0..n {
                    let Some(tap) = bilinear_tap(cv[2 * p], cv[2 * p + 1], h, w) else {
                        continue;
                    };
                    for ch in 0..c {
                        let go = g.data()[ch * n + p];
                        let plane = ch * h * w..(ch + 1) * h * w;
                        let v = tap.corners(&fv[plane.clone()], w);
                        gc[2 * p] = gc[2 * p] + go * ((v[1] - v[0]) * (one - tap.fy) + (v[3] - v[2]) * tap.fy);
                        gc[2 * p + 1] = gc[2 * p + 1] + go * ((v[2] - v[0]) * (one - tap.fx) + (v[3] - v[1]) * tap.fx);
                        tap.scatter(&mut gf[plane], w, go);
                    }
                }
                acc(*feat, Tensor::from_parts(sf.to_vec(), gf));
                acc(*coords, Tensor::from_parts(val(*coords).shape().to_vec(), gc));
            }
            Op::GatherRows { x, idx } => {
                let sx = val(*x).shape();
                let d = sx[1];
                let mut gx = vec![T::zero(); sx[0] * d];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..d {
                        gx[src * d + j] = gx[src * d + j] + g.data()[r * d + j];
                    }
                }
                acc(*x, Tensor::from_parts(sx.to_vec(), gx));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    acc(
                        p,
                        Tensor::from_parts(val(p).shape().to_vec(), g.data()[offset..offset + len].to_vec()),
                    );
                    offset += len;
                }
            }
            Op::Sum(x) => {
                let s = g.item();
                acc(*x, Tensor::full(val(*x).shape(), s));
            }
            Op::LocalCorrelation { f1, f2, idx, k, scale } => {
                let k = *k;
                let (a, b) = (val(*f1).data(), val(*f2).data());
                let d = val(*f1).shape()[1];
                let n = a.len() / d;
                let mut ga = vec![T::zero(); a.len()];
                let mut gb = vec![T::zero(); b.len()];
                for p in 0..n {
                    for j in 0..k {
                        let Some(q) = idx[p * k + j] else { continue };
                        let go = g.data()[p * k + j] * *scale;
                        for t in 0..d {
                            ga[p * d + t] = ga[p * d + t] + go * b[q * d + t];
                            gb[q * d + t] = gb[q * d + t] + go * a[p * d + t];
                        }
                    }
                }
                acc(*f1, Tensor::from_parts(val(*f1).shape().to_vec(), ga));
                acc(*f2, Tensor::from_parts(val(*f2).shape().to_vec(), gb));
            }
            Op::LocalAggregate { p, v, idx, k } => {
                let k = *k;
                let (pv, vv) = (val(*p).data(), val(*v).data());
                let c = val(*v).shape()[1];
                let n = pv.len() / k;
                let mut gp = vec![T::zero(); pv.len()];
                let mut gv = vec![T::zero(); vv.len()];
                for r in 0..n {
                    let go = &g.data()[r * c..(r + 1) * c];
                    for j in 0..k {
                        let Some(q) = idx[r * k + j] else { continue };
                        let mut dot = T::zero();
                        for ch in 0..c {
                            dot = dot + go[ch] * vv[q * c + ch];
                            gv[q * c + ch] = gv[q * c + ch] + pv[r * k + j] * go[ch];
                        }
                        gp[r * k + j] = dot;
                    }
                }
                acc(*p, Tensor::from_parts(val(*p).shape().to_vec(), gp));
                acc(*v, Tensor::from_parts(val(*v).shape().to_vec(), gv));
            }
            Op::ConvexCombine { w, flow, factor } => {
                let sf = val(*flow).shape();
                let (h, wd, c) = (sf[0], sf[1], sf[2]);
                let (wv, fv) = (val(*w).data(), val(*flow).data());
                let scale = T::from_usize(*factor).unwrap();
                let mut gw = vec![T::zero(); wv.len()];
                let mut gf = vec![T::zero(); fv.len()];
                for_each_convex_tap(h, wd, *factor, |row, fine, k, src| {
                    let go = &g.data()[fine * c..(fine + 1) * c];
                    let mut dot = T::zero();
                    for ch in 0..c {
                        dot = dot + go[ch] * fv[src * c + ch];
                        gf[src * c + ch] = gf[src * c + ch] + wv[row * 9 + k] * scale * go[ch];
                    }
                    gw[row * 9 + k] = gw[row * 9 + k] + dot * scale;
                });
                acc(*w, Tensor::from_parts(val(*w).shape().to_vec(), gw));
                acc(*flow, Tensor::from_parts(sf.to_vec(), gf));
            }
        }
    }
}

/// Visits `(weight_row, fine_pixel, neighbor, coarse_pixel)` for every tap of
/// a convex upsampling with edge-replicated 3×3 neighborhoods.
fn for_each_convex_tap(h: usize, w: usize, factor: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    let fw = w * factor;
    for i in 0..h {
        for j in 0..w {
            for a in 0..factor {
                for b in 0..factor {
                    let row = ((i * w + j) * factor + a) * factor + b;
                    let fine = (i * factor + a) * fw + j * factor + b;
                    for k in 0..9 {
                        let si = (i + k / 3).saturating_sub(1).min(h - 1);
                        let sj = (j + k % 3).saturating_sub(1).min(w - 1);
                        f(row, fine, k, si * w + sj);
                    }
                }
            }
        }
    }
}
