//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s. Values are computed
//! eagerly; [`Graph::backward`] walks the tape in reverse and returns the
//! gradient of a scalar loss with respect to every node that needs one.

use std::collections::HashMap;

use super::kernels::{self, sigmoid, ConvGeom};
use super::params::ParamStore;
use super::tensor::{Elem, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<T>, rstd: Vec<T> },
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddChannel { x: Var, bias: Var },
    Upsample2x(Var),
    Concat { a: Var, b: Var },
    SliceChannels { x: Var, start: usize },
    Clamp { x: Var, lo: T, hi: T },
    Reshape(Var),
    SwapLast2(Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    MeanSpatial(Var),
    Gather { table: Var, ids: Vec<usize> },
    Mse(Var, Var),
    KlNormal { mu: Var, logvar: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    DotConst { x: Var, r: Vec<T> },
    Sum(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::GroupNorm { .. } => "group_norm",
            Op::Silu(_) => "silu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Softmax { .. } => "softmax",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddChannel { .. } => "add_channel",
            Op::Upsample2x(_) => "upsample2x",
            Op::Concat { .. } => "concat",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Clamp { .. } => "clamp",
            Op::Reshape(_) => "reshape",
            Op::SwapLast2(_) => "swap_last2",
            Op::Bmm { .. } => "bmm",
            Op::MeanSpatial(_) => "mean_spatial",
            Op::Gather { .. } => "gather",
            Op::Mse(..) => "mse_loss",
            Op::KlNormal { .. } => "kl_normal",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::DotConst { .. } => "dot_const",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Elem> Grads<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shapes[v.0].clone(), g.clone()).ok()
    }

    pub(crate) fn raw(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }
}

pub struct Graph<T: Elem = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    overrides: HashMap<String, Var>,
    first_non_finite: Option<&'static str>,
}

impl<T: Elem> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            overrides: HashMap::new(),
            first_non_finite: None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_with(value, op, needs_grad)
    }

    fn push_with(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        if cfg!(debug_assertions) && self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some(op.name());
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Name of the first op whose output contained NaN/Inf (debug builds only).
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.first_non_finite
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push_with(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push_with(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Route lookups of parameter `name` to `var` instead of the store.
    pub fn bind_override(&mut self, name: impl Into<String>, var: Var) {
        self.overrides.insert(name.into(), var);
    }

    /// Leaf for a stored parameter, created on first use. Frozen parameters
    /// are bound as constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.overrides.get(name) {
            return Ok(v);
        }
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let v = self.push_with(p.tensor.cast(), Op::Leaf, !p.frozen);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound from a store during this graph's forward pass.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn dims4(&self, v: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
        self.value(v).dims4().map_err(|_| shape_err!("{what}: expected NCHW input, got {:?}", self.shape(v)))
    }

    // ---- ops -------------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, wd) = self.dims4(x, "conv2d input")?;
        let (k, cw, kh, kw) = self.dims4(w, "conv2d weight")?;
        if cw != c {
            return Err(shape_err!("conv2d: input has {c} channels but weight expects {cw}"));
        }
        if self.shape(b) != [k] {
            return Err(shape_err!("conv2d: bias shape {:?}, expected [{k}]", self.shape(b)));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d: stride must be positive"));
        }
        let span_h = h + 2 * padding;
        let span_w = wd + 2 * padding;
        if span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
            return Err(shape_err!(
                "conv2d: ({h}+2·{padding}−{kh})/{stride} is not integral for input {h}x{wd}"
            ));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            k,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (span_h - kh) / stride + 1,
            wo: (span_w - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let t = Tensor::new([n, k, geom.ho, geom.wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, d) = match self.shape(x) {
            &[n, d] => (n, d),
            s => return Err(shape_err!("linear: input must be [N,D], got {s:?}")),
        };
        let e = match self.shape(w) {
            &[dw, e] if dw == d => e,
            s => return Err(shape_err!("linear: weight {s:?} does not match input dim {d}")),
        };
        if self.shape(b) != [e] {
            return Err(shape_err!("linear: bias shape {:?}, expected [{e}]", self.shape(b)));
        }
        let mut out = Vec::with_capacity(n * e);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        T::gemm(n, d, e, self.value(x).data(), (d, 1), self.value(w).data(), (e, 1), T::one(), &mut out, (e, 1));
        let t = Tensor::new([n, e], out)?;
        Ok(self.push(t, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(shape_err!("group_norm: {c} channels not divisible into {groups} groups"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!("group_norm: gamma/beta must be [{c}]"));
        }
        let cpg = c / groups;
        let m = cpg * h * w;
        let xs = self.value(x).data();
        let gam = self.value(gamma).data();
        let bet = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        let mut rstd = Vec::with_capacity(n * groups);
        let mf = T::of(m as f64);
        for ni in 0..n {
            for gi in 0..groups {
                let start = (ni * c + gi * cpg) * h * w;
                let seg = &xs[start..start + m];
                let mean = seg.iter().copied().sum::<T>() / mf;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
                let r = T::one() / (var + T::of(eps)).sqrt();
                rstd.push(r);
                for (j, &v) in seg.iter().enumerate() {
                    let ch = gi * cpg + j / (h * w);
                    let xh = (v - mean) * r;
                    xhat[start + j] = xh;
                    out[start + j] = xh * gam[ch] + bet[ch];
                }
            }
        }
        let t = Tensor::new([n, c, h, w], out)?;
        Ok(self.push(t, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd }, &[x, gamma, beta]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * sigmoid(v));
        self.push(t, Op::Silu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.tanh());
        self.push(t, Op::Tanh(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.exp());
        self.push(t, Op::Exp(x), &[x])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("softmax: axis {axis} out of range for {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(xs[idx(j)]));
                let mut total = T::zero();
                for j in 0..len {
                    let e = (xs[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[idx(j)] = out[idx(j)] / total;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    /// `x[N,C,H,W] + bias[N,C]` broadcast over the spatial dims.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "add_channel")?;
        if self.shape(bias) != [n, c] {
            return Err(shape_err!("add_channel: bias {:?}, expected [{n},{c}]", self.shape(bias)));
        }
        let bs = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(h * w).enumerate() {
            let bv = bs[i];
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
        let t = Tensor::new([n, c, h, w], out)?;
        Ok(self.push(t, Op::AddChannel { x, bias }, &[x, bias]))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "upsample2x")?;
        let xs = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(p * h2 + y) * w2 + xx] = xs[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new([n, c, h2, w2], out)?;
        Ok(self.push(t, Op::Upsample2x(x), &[x]))
    }

    /// Channel concatenation of two NCHW tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.dims4(a, "concat")?;
        let (nb, cb, hb, wb) = self.dims4(b, "concat")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_err!("concat: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (pa + pb));
        for ni in 0..n {
            out.extend_from_slice(&self.value(a).data()[ni * pa..(ni + 1) * pa]);
            out.extend_from_slice(&self.value(b).data()[ni * pb..(ni + 1) * pb]);
        }
        let t = Tensor::new([n, ca + cb, h, w], out)?;
        Ok(self.push(t, Op::Concat { a, b }, &[a, b]))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "slice_channels")?;
        if len == 0 || start + len > c {
            return Err(shape_err!("slice_channels: [{start}, {}) out of range for {c} channels", start + len));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * len * plane);
        for ni in 0..n {
            let base = (ni * c + start) * plane;
            out.extend_from_slice(&self.value(x).data()[base..base + len * plane]);
        }
        let t = Tensor::new([n, len, h, w], out)?;
        Ok(self.push(t, Op::SliceChannels { x, start }, &[x]))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let t = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(t, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// `[N, A, B]` → `[N, B, A]`.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let (n, a, b) = match self.shape(x) {
            &[n, a, b] => (n, a, b),
            s => return Err(shape_err!("swap_last2: expected rank 3, got {s:?}")),
        };
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        for ni in 0..n {
            for i in 0..a {
                for j in 0..b {
                    out[(ni * b + j) * a + i] = xs[(ni * a + i) * b + j];
                }
            }
        }
        let t = Tensor::new([n, b, a], out)?;
        Ok(self.push(t, Op::SwapLast2(x), &[x]))
    }

    /// Batched matmul `a[N,L,M] · b[N,M,P]`, or `a · bᵀ` with `b[N,P,M]` when
    /// `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (n, l, m) = match self.shape(a) {
            &[n, l, m] => (n, l, m),
            s => return Err(shape_err!("bmm: lhs must be rank 3, got {s:?}")),
        };
        let p = match (self.shape(b), trans_b) {
            (&[nb, mb, p], false) if nb == n && mb == m => p,
            (&[nb, p, mb], true) if nb == n && mb == m => p,
            (s, _) => return Err(shape_err!("bmm: rhs {s:?} incompatible with lhs [{n},{l},{m}]")),
        };
        let mut out = vec![T::zero(); n * l * p];
        let bstr = if trans_b { (1, m) } else { (p, 1) };
        for ni in 0..n {
            T::gemm(
                l,
                m,
                p,
                &self.value(a).data()[ni * l * m..(ni + 1) * l * m],
                (m, 1),
                &self.value(b).data()[ni * m * p..(ni + 1) * m * p],
                bstr,
                T::zero(),
                &mut out[ni * l * p..(ni + 1) * l * p],
                (p, 1),
            );
        }
        let t = Tensor::new([n, l, p], out)?;
        Ok(self.push(t, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    /// Global average pool `[N,C,H,W]` → `[N,C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "mean_spatial")?;
        let hw = T::of((h * w) as f64);
        let out = self.value(x).data().chunks(h * w).map(|ch| ch.iter().copied().sum::<T>() / hw).collect();
        let t = Tensor::new([n, c], out)?;
        Ok(self.push(t, Op::MeanSpatial(x), &[x]))
    }

    /// Row lookup `table[ids[i]]` → `[len(ids), D]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = match self.shape(table) {
            &[r, d] => (r, d),
            s => return Err(shape_err!("gather: table must be rank 2, got {s:?}")),
        };
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(shape_err!("gather: row {i} out of range for {rows} rows"));
            }
            out.extend_from_slice(&self.value(table).data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new([ids.len(), d], out)?;
        Ok(self.push(t, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// Mean squared difference.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse_loss")?;
        let n = T::of(self.value(a).numel() as f64);
        let s: T = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| (p - q) * (p - q)).sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b]))
    }

    /// `½·mean(μ² + e^logvar − 1 − logvar)`: KL to a standard normal, per element.
    pub fn kl_normal(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        self.same_shape(mu, logvar, "kl_normal")?;
        let n = T::of(self.value(mu).numel() as f64);
        let half = T::of(0.5);
        let s: T = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(logvar).data())
            .map(|(&m, &lv)| m * m + lv.exp() - T::one() - lv)
            .sum();
        Ok(self.push(Tensor::scalar(half * s / n), Op::KlNormal { mu, logvar }, &[mu, logvar]))
    }

    /// Mean softmax cross-entropy of `logits[N,K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match self.shape(logits) {
            &[n, k] => (n, k),
            s => return Err(shape_err!("cross_entropy: logits must be [N,K], got {s:?}")),
        };
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(shape_err!("cross_entropy: labels must be {n} values in [0,{k})"));
        }
        let xs = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for i in 0..n {
            let row = &xs[i * k..(i + 1) * k];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            total = total + lse - row[labels[i]];
        }
        let loss = total / T::of(n as f64);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// `Σ x·r` for a constant weight tensor `r`; turns any output into a
    /// scalar probe for gradient checks.
    pub fn dot_const(&mut self, x: Var, r: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != r.shape() {
            return Err(shape_err!("dot_const: {:?} vs {:?}", self.shape(x), r.shape()));
        }
        let s = self.value(x).data().iter().zip(r.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::DotConst { x, r: r.data().to_vec() }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `softmax(q·kᵀ/√D)·v` over `[N,L,D]` inputs.
    pub fn attention_single_head(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(shape_err!(
                "attention: q {:?}, k {:?}, v {:?} must share an [N,L,D] shape",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            ));
        }
        let scores = self.bmm(q, k, true)?;
        let scores = self.scale(scores, 1.0 / (s[2] as f64).sqrt());
        let weights = self.softmax(scores, 2)?;
        self.bmm(weights, v, false)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!("backward: loss must be scalar, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Grads { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), dy, geom, ng(*x), ng(*w));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                self.accumulate(grads, *b, db);
            }
            Op::Linear { x, w, b } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let e = self.shape(*w)[1];
                if ng(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    T::gemm(n, e, d, dy, (e, 1), val(*w), (1, e), T::zero(), &mut dx, (d, 1));
                    self.accumulate(grads, *x, dx);
                }
                if ng(*w) {
                    let mut dw = vec![T::zero(); d * e];
                    T::gemm(d, n, e, val(*x), (1, d), dy, (e, 1), T::zero(), &mut dw, (e, 1));
                    self.accumulate(grads, *w, dw);
                }
                let mut db = vec![T::zero(); e];
                for row in dy.chunks(e) {
                    db.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                }
                self.accumulate(grads, *b, db);
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().expect("checked in forward");
                let cpg = c / groups;
                let plane = h * w;
                let m = cpg * plane;
                let gam = val(*gamma);
                let mut dx = vec![T::zero(); dy.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mf = T::of(m as f64);
                for ni in 0..n {
                    for gi in 0..*groups {
                        let start = (ni * c + gi * cpg) * plane;
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..m {
                            let ch = gi * cpg + j / plane;
                            let g = dy[start + j];
                            dgamma[ch] = dgamma[ch] + g * xhat[start + j];
                            dbeta[ch] = dbeta[ch] + g;
                            let dxh = g * gam[ch];
                            sum_d = sum_d + dxh;
                            sum_dx = sum_dx + dxh * xhat[start + j];
                        }
                        let (mean_d, mean_dx) = (sum_d / mf, sum_dx / mf);
                        let r = rstd[ni * groups + gi];
                        for j in 0..m {
                            let ch = gi * cpg + j / plane;
                            let dxh = dy[start + j] * gam[ch];
                            dx[start + j] = r * (dxh - mean_d - xhat[start + j] * mean_dx);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Silu(x) => {
                let g = val(*x)
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| {
                        let s = sigmoid(v);
                        d * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::Tanh(x) => {
                let g = node.value.data().iter().zip(dy).map(|(&y, &d)| d * (T::one() - y * y)).collect();
                self.accumulate(grads, *x, g);
            }
            Op::Exp(x) => {
                let g = node.value.data().iter().zip(dy).map(|(&y, &d)| d * y).collect();
                self.accumulate(grads, *x, g);
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let mut g = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot = (0..*len).map(|j| dy[idx(j)] * y[idx(j)]).sum::<T>();
                        for j in 0..*len {
                            g[idx(j)] = y[idx(j)] * (dy[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.to_vec());
                self.accumulate(grads, *b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.to_vec());
                self.accumulate(grads, *b, dy.iter().map(|&d| -d).collect());
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    self.accumulate(grads, *a, dy.iter().zip(val(*b)).map(|(&d, &q)| d * q).collect());
                }
                if ng(*b) {
                    self.accumulate(grads, *b, dy.iter().zip(val(*a)).map(|(&d, &p)| d * p).collect());
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, dy.iter().map(|&d| d * *c).collect()),
            Op::AddChannel { x, bias } => {
                self.accumulate(grads, *x, dy.to_vec());
                let (_, _, h, w) = node.value.dims4().expect("rank 4");
                let db = dy.chunks(h * w).map(|ch| ch.iter().copied().sum()).collect();
                self.accumulate(grads, *bias, db);
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().expect("rank 4");
                let (h2, w2) = (2 * h, 2 * w);
                let mut g = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            let d = &mut g[(p * h + y / 2) * w + xx / 2];
                            *d = *d + dy[(p * h2 + y) * w2 + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.nodes[a.0].value.dims4().expect("rank 4");
                let cb = self.shape(*b)[1];
                let (pa, pb) = (ca * h * w, cb * h * w);
                let mut ga = Vec::with_capacity(n * pa);
                let mut gb = Vec::with_capacity(n * pb);
                for ni in 0..n {
                    let row = &dy[ni * (pa + pb)..(ni + 1) * (pa + pb)];
                    ga.extend_from_slice(&row[..pa]);
                    gb.extend_from_slice(&row[pa..]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::SliceChannels { x, start } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().expect("rank 4");
                let len = node.value.shape()[1];
                let plane = h * w;
                let mut g = vec![T::zero(); n * c * plane];
                for ni in 0..n {
                    let base = (ni * c + start) * plane;
                    g[base..base + len * plane].copy_from_slice(&dy[ni * len * plane..(ni + 1) * len * plane]);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Clamp { x, lo, hi } => {
                let g = val(*x)
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v >= *lo && v <= *hi { d } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, dy.to_vec()),
            Op::SwapLast2(x) => {
                let (n, a, b) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let mut g = vec![T::zero(); dy.len()];
                for ni in 0..n {
                    for i in 0..a {
                        for j in 0..b {
                            g[(ni * a + i) * b + j] = dy[(ni * b + j) * a + i];
                        }
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Bmm { a, b, trans_b } => {
                let (n, l, m) = (self.shape(*a)[0], self.shape(*a)[1], self.shape(*a)[2]);
                let p = node.value.shape()[2];
                let (av, bv) = (val(*a), val(*b));
                if ng(*a) {
                    // da = dy · bᵀ (or dy · b when b is stored transposed)
                    let bstr = if *trans_b { (m, 1) } else { (1, p) };
                    let mut g = vec![T::zero(); n * l * m];
                    for ni in 0..n {
                        T::gemm(
                            l,
                            p,
                            m,
                            &dy[ni * l * p..(ni + 1) * l * p],
                            (p, 1),
                            &bv[ni * m * p..(ni + 1) * m * p],
                            bstr,
                            T::zero(),
                            &mut g[ni * l * m..(ni + 1) * l * m],
                            (m, 1),
                        );
                    }
                    self.accumulate(grads, *a, g);
                }
                if ng(*b) {
                    let mut g = vec![T::zero(); n * m * p];
                    for ni in 0..n {
                        let a_blk = &av[ni * l * m..(ni + 1) * l * m];
                        let dy_blk = &dy[ni * l * p..(ni + 1) * l * p];
                        let out = &mut g[ni * m * p..(ni + 1) * m * p];
                        if *trans_b {
                            // db[P,M] = dyᵀ · a
                            T::gemm(p, l, m, dy_blk, (1, p), a_blk, (m, 1), T::zero(), out, (m, 1));
                        } else {
                            // db[M,P] = aᵀ · dy
                            T::gemm(m, l, p, a_blk, (1, m), dy_blk, (p, 1), T::zero(), out, (p, 1));
                        }
                    }
                    self.accumulate(grads, *b, g);
                }
            }
            Op::MeanSpatial(x) => {
                let (_, _, h, w) = self.nodes[x.0].value.dims4().expect("rank 4");
                let hw = T::of((h * w) as f64);
                let g = dy.iter().flat_map(|&d| std::iter::repeat_n(d / hw, h * w)).collect();
                self.accumulate(grads, *x, g);
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                let mut g = vec![T::zero(); self.nodes[table.0].value.numel()];
                for (i, &row) in ids.iter().enumerate() {
                    for j in 0..d {
                        g[row * d + j] = g[row * d + j] + dy[i * d + j];
                    }
                }
                self.accumulate(grads, *table, g);
            }
            Op::Mse(a, b) => {
                let n = T::of(self.nodes[a.0].value.numel() as f64);
                let s = T::of(2.0) * dy[0] / n;
                let da: Vec<T> = val(*a).iter().zip(val(*b)).map(|(&p, &q)| s * (p - q)).collect();
                if ng(*b) {
                    self.accumulate(grads, *b, da.iter().map(|&v| -v).collect());
                }
                self.accumulate(grads, *a, da);
            }
            Op::KlNormal { mu, logvar } => {
                let n = T::of(self.nodes[mu.0].value.numel() as f64);
                let s = dy[0] / n;
                self.accumulate(grads, *mu, val(*mu).iter().map(|&m| s * m).collect());
                let half = T::of(0.5);
                self.accumulate(grads, *logvar, val(*logvar).iter().map(|&lv| s * half * (lv.exp() - T::one())).collect());
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let s = dy[0] / T::of(labels.len() as f64);
                let mut g: Vec<T> = probs.iter().map(|&p| p * s).collect();
                for (i, &l) in labels.iter().enumerate() {
                    g[i * k + l] = g[i * k + l] - s;
                }
                self.accumulate(grads, *logits, g);
            }
            Op::DotConst { x, r } => self.accumulate(grads, *x, r.iter().map(|&v| v * dy[0]).collect()),
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(grads, *x, vec![dy[0]; n]);
            }
        }
    }
}
