use std::sync::Arc;

use super::kernels::{gemm, signed_sqrt, signed_sqrt_grad, ConvGeom};
use super::{split_axis, CsrMatrix, Real, Tensor};
use crate::error::{dim_err, Error, Result};

/// Smoothing constant of the signed square root applied to second-order descriptors.
pub const SIGNED_SQRT_EPS: Real = 1e-3;

const BN_EPS: Real = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize by the statistics of the current batch.
    Train,
    /// Normalize by externally supplied running statistics.
    Eval { mean: &'a [Real], var: &'a [Real] },
}

/// Per-feature statistics of a train-mode batch-norm call, for running-average updates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Real>,
    /// Unbiased (n − 1) variance estimate.
    pub var: Vec<Real>,
    pub count: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    AddBias(Var, Var),
    Relu(Var),
    LeakyRelu(Var, Real),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumAll(Var),
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        lens: Vec<usize>,
        inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
    },
    Transpose(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
        cout: usize,
    },
    Gather {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        outer: usize,
        len: usize,
        inner: usize,
        x_hat: Vec<Real>,
        inv_std: Vec<Real>,
        train: bool,
    },
    Spmv {
        mat: Arc<CsrMatrix>,
        x: Var,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
        cols: usize,
    },
    LocalSecondOrder {
        x: Var,
        groups: Arc<Vec<Vec<usize>>>,
        f: usize,
        scaled: Vec<Real>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<Real>,
        targets: Vec<Option<usize>>,
        count: usize,
    },
    SumSquares(Var),
    Cleared,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable operations for one forward pass.
///
/// Operations are appended in execution order, so the node list is always a
/// topological order. [`backward`](Tape::backward) walks it in reverse, leaves
/// the accumulated gradients on the leaves and clears everything else.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    signature: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x0100_0000_01b3).rotate_left(5)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false, signature: 0xcbf2_9ce4_8422_2325 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every discrete branch taken so far (ReLU masks, max-pool
    /// winners). Two forward passes with equal signatures took the same
    /// piecewise-smooth branch.
    pub fn branch_signature(&self) -> u64 {
        self.signature
    }

    /// Registers a leaf; it receives a gradient iff `t.is_requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.is_requires_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated on a leaf by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[Real]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_leaf(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros([0]))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::Contract("tape already consumed by backward(); record a fresh forward pass".into()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[Real] {
        self.nodes[v.0].value.data()
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        self.push(out, Op::Transpose(x), &[x])
    }

    /// Sparse-dense product `mat · x` for a 2-D `x`; differentiable in `x`.
    pub fn spmv(&mut self, mat: &Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let out = mat.matmul_dense(self.value(x))?;
        self.push(out, Op::Spmv { mat: Arc::clone(mat), x }, &[x])
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(Real, Real) -> Real) -> Tensor {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(Real) -> Real) -> Tensor {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        Tensor::new(self.shape(x).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: Real) -> Result<Var> {
        let out = self.map(x, |v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Adds a per-feature vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().ok_or_else(|| dim_err!("add_bias on a scalar"))?;
        if self.shape(bias) != [c] {
            return Err(dim_err!(
                "bias of shape {:?} does not match feature extent {c} of {:?}",
                self.shape(bias),
                self.shape(x)
            ));
        }
        let b = self.data(bias);
        let data = self.data(x).chunks(c).flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb)).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| v.max(0.0));
        let mut h = self.signature;
        for &v in self.data(x) {
            h = mix(h, (v > 0.0) as u64);
        }
        self.signature = h;
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: Real) -> Result<Var> {
        let out = self.map(x, |v| if v > 0.0 { v } else { slope * v });
        let mut h = self.signature;
        for &v in self.data(x) {
            h = mix(h, (v > 0.0) as u64);
        }
        self.signature = h;
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis(self.shape(x), axis)?;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| src[at(k)]).fold(Real::NEG_INFINITY, Real::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(out, Op::Softmax { x, outer, len, inner }, &[x])
    }

    // ---- reductions and layout -----------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.data(x).iter().sum());
        self.push(out, Op::SumAll(x), &[x])
    }

    /// Sum of squared entries, as a scalar.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.data(x).iter().map(|v| v * v).sum());
        self.push(out, Op::SumSquares(x), &[x])
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis(self.shape(x), axis)?;
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * len + k) * inner + i];
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::SumAxis { x, outer, len, inner }, &[x])
    }

    /// Maximum over `axis`, removing it from the shape. Ties go to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis(self.shape(x), axis)?;
        if len == 0 {
            return Err(dim_err!("max over an empty axis"));
        }
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * len) * inner + i;
                for k in 1..len {
                    let at = (o * len + k) * inner + i;
                    if src[at] > src[best] {
                        best = at;
                    }
                }
                out[o * inner + i] = src[best];
                argmax[o * inner + i] = best;
            }
        }
        self.signature = argmax.iter().fold(self.signature, |h, &a| mix(h, a as u64));
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::MaxAxis { x, argmax }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| dim_err!("concat of nothing"))?;
        let base = self.shape(first).to_vec();
        let (outer, _, inner) = split_axis(&base, axis)?;
        let mut lens = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err!("concat along axis {axis}: {:?} does not match {:?}", s, base));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in inputs.iter().zip(&lens) {
                out.extend_from_slice(&self.data(v)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::Concat { inputs: inputs.to_vec(), outer, lens, inner }, inputs)
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (outer, ext, inner) = split_axis(self.shape(x), axis)?;
        if start + len > ext {
            return Err(dim_err!("slice {start}..{} out of range for extent {ext}", start + len));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * ext + start) * inner..(o * ext + start + len) * inner]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::Slice { x, outer, len: ext, inner, start }, &[x])
    }

    /// Selects rows of a 2-D tensor; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, cols) = self.value(x).dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(dim_err!("row {bad} out of range for {n} rows"));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::new([idx.len(), cols], out)?;
        self.push(out, Op::GatherRows { x, idx: idx.to_vec(), cols }, &[x])
    }

    // ---- spatial operators ---------------------------------------------

    /// Same-padded 2-D convolution of an H×W×Cin raster with a kh×kw×Cin×Cout kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (h, w, cin) = match *self.shape(x) {
            [h, w, c] => (h, w, c),
            ref s => return Err(dim_err!("conv2d input must be H×W×C, got {:?}", s)),
        };
        let (kh, kw, kc, cout) = match *self.shape(kernel) {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(dim_err!("conv2d kernel must be kh×kw×Cin×Cout, got {:?}", s)),
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!("same-padded convolution needs odd kernel extents, got {kh}×{kw}")));
        }
        if kc != cin {
            return Err(dim_err!("kernel expects {kc} input channels, raster {:?} has {cin}", self.shape(x)));
        }
        let geom = ConvGeom { h, w, cin, kh, kw };
        let cols = geom.im2col(self.data(x));
        let plen = geom.patch_len();
        let mut out = vec![0.0; h * w * cout];
        gemm(h * w, plen, cout, 1.0, (&cols, plen as isize, 1), (self.data(kernel), cout as isize, 1), 0.0, &mut out);
        let out = Tensor::new([h, w, cout], out)?;
        self.push(out, Op::Conv2d { x, kernel, geom, cout }, &[x, kernel])
    }

    /// Stride-1 max pooling with a `window`×`window` footprint and same padding
    /// (the window extends toward higher indices; out-of-raster cells are ignored).
    /// Ties go to the lowest linear index.
    pub fn maxpool2d_same(&mut self, x: Var, window: usize) -> Result<Var> {
        let (h, w, c) = match *self.shape(x) {
            [h, w, c] => (h, w, c),
            ref s => return Err(dim_err!("maxpool2d input must be H×W×C, got {:?}", s)),
        };
        if window == 0 {
            return Err(Error::Config("pooling window must be positive".into()));
        }
        let before = (window - 1) / 2;
        let src = self.data(x);
        let mut out = vec![0.0; h * w * c];
        let mut argmax = vec![0usize; h * w * c];
        for r in 0..h {
            let r0 = r.saturating_sub(before);
            let r1 = (r + window - before).min(h);
            for col in 0..w {
                let c0 = col.saturating_sub(before);
                let c1 = (col + window - before).min(w);
                for ch in 0..c {
                    let mut best = usize::MAX;
                    for rr in r0..r1 {
                        for cc in c0..c1 {
                            let at = (rr * w + cc) * c + ch;
                            if best == usize::MAX || src[at] > src[best] {
                                best = at;
                            }
                        }
                    }
                    let o = (r * w + col) * c + ch;
                    out[o] = src[best];
                    argmax[o] = best;
                }
            }
        }
        self.signature = argmax.iter().fold(self.signature, |h, &a| mix(h, a as u64));
        let out = Tensor::new([h, w, c], out)?;
        self.push(out, Op::Gather { x, argmax }, &[x])
    }

    /// Row-wise maximum over index groups: `out[r] = max_{j ∈ groups[r]} x[j]`,
    /// elementwise per column. Ties go to the lowest row index.
    pub fn group_max_rows(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (n, cols) = self.value(x).dims2()?;
        let src = self.data(x);
        let mut out = vec![0.0; groups.len() * cols];
        let mut argmax = vec![0usize; groups.len() * cols];
        for (r, group) in groups.iter().enumerate() {
            let mut members = group.clone();
            members.sort_unstable();
            if members.is_empty() || members[members.len() - 1] >= n {
                return Err(dim_err!("group {r} is empty or indexes past {n} rows"));
            }
            for c in 0..cols {
                let mut best = members[0] * cols + c;
                for &j in &members[1..] {
                    let at = j * cols + c;
                    if src[at] > src[best] {
                        best = at;
                    }
                }
                out[r * cols + c] = src[best];
                argmax[r * cols + c] = best;
            }
        }
        self.signature = argmax.iter().fold(self.signature, |h, &a| mix(h, a as u64));
        let out = Tensor::new([groups.len(), cols], out)?;
        self.push(out, Op::Gather { x, argmax }, &[x])
    }

    /// Second-order pooling over row groups of an n×f matrix.
    ///
    /// Row `r` of the q×f² output is the row-major flattening of
    /// `signed_sqrt((1/|S_r|) Σ_{j∈S_r} x_j x_jᵀ)` where `S_r = groups[r]`.
    ///
    /// Rows are accumulated in lexicographic order of their values, so the
    /// result depends only on the multiset of rows and not on how they are indexed.
    pub fn local_second_order(&mut self, x: Var, groups: &Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let (n, f) = self.value(x).dims2()?;
        let src = self.data(x);
        let ff = f * f;
        let row_of = |j: usize| &src[j * f..(j + 1) * f];
        let mut scaled = vec![0.0; groups.len() * ff];
        for (r, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(dim_err!("second-order pooling group {r} is empty"));
            }
            if let Some(&j) = group.iter().find(|&&j| j >= n) {
                return Err(dim_err!("group {r} indexes row {j} of {n}"));
            }
            let mut order = group.clone();
            order.sort_by(|&a, &b| {
                row_of(a)
                    .iter()
                    .zip(row_of(b))
                    .map(|(p, q)| p.total_cmp(q))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let acc = &mut scaled[r * ff..(r + 1) * ff];
            for j in order {
                let row = row_of(j);
                for a in 0..f {
                    let xa = row[a];
                    acc[a * f..(a + 1) * f].iter_mut().zip(row).for_each(|(o, xb)| *o += xa * xb);
                }
            }
            let inv = 1.0 / group.len() as Real;
            acc.iter_mut().for_each(|v| *v *= inv);
        }
        let out: Vec<Real> = scaled.iter().map(|&v| signed_sqrt(v, SIGNED_SQRT_EPS)).collect();
        let out = Tensor::new([groups.len(), ff], out)?;
        self.push(out, Op::LocalSecondOrder { x, groups: Arc::clone(groups), f, scaled }, &[x])
    }

    // ---- normalization and loss ----------------------------------------

    /// Batch normalization over every axis except `axis`, with learnable
    /// per-feature scale `gamma` and shift `beta`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (outer, len, inner) = split_axis(self.shape(x), axis)?;
        if self.shape(gamma) != [len] || self.shape(beta) != [len] {
            return Err(dim_err!(
                "batch-norm scale/shift {:?}/{:?} do not match {len} features",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let count = outer * inner;
        if count == 0 {
            return Err(Error::Contract("batch norm over an empty batch".into()));
        }
        let src = self.data(x);
        let at = |o: usize, k: usize, i: usize| (o * len + k) * inner + i;
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; len];
                let mut var = vec![0.0; len];
                for k in 0..len {
                    let mut s = 0.0;
                    for o in 0..outer {
                        for i in 0..inner {
                            s += src[at(o, k, i)];
                        }
                    }
                    let m = s / count as Real;
                    let mut ss = 0.0;
                    for o in 0..outer {
                        for i in 0..inner {
                            let d = src[at(o, k, i)] - m;
                            ss += d * d;
                        }
                    }
                    mean[k] = m;
                    var[k] = ss / count as Real;
                }
                let unbiased = if count > 1 {
                    var.iter().map(|v| v * count as Real / (count - 1) as Real).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats { mean: mean.clone(), var: unbiased, count };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != len || var.len() != len {
                    return Err(dim_err!("running statistics do not match {len} features"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut x_hat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    let p = at(o, k, i);
                    x_hat[p] = (src[p] - mean[k]) * inv_std[k];
                    out[p] = g[k] * x_hat[p] + b[k];
                }
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let train = matches!(mode, BnMode::Train);
        let v = self.push(
            out,
            Op::BatchNorm { x, gamma, beta, outer, len, inner, x_hat, inv_std, train },
            &[x, gamma, beta],
        )?;
        Ok((v, stats))
    }

    /// Mean softmax cross-entropy over the rows that carry a target class.
    /// `targets[r]` is a 0-based class index or `None` for excluded rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, p) = self.value(logits).dims2()?;
        if targets.len() != n {
            return Err(dim_err!("{} targets for {n} logit rows", targets.len()));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Contract("cross-entropy over a batch with no labeled pixel".into()));
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; n * p];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= p {
                return Err(Error::Contract(format!("target class {t} outside 0..{p}")));
            }
            let row = &src[r * p..(r + 1) * p];
            let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let z: Real = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[t];
            for c in 0..p {
                probs[r * p + c] = (row[c] - lse).exp();
            }
        }
        let out = Tensor::scalar(total / count as Real);
        self.push(out, Op::CrossEntropy { logits, probs, targets: targets.to_vec(), count }, &[logits])
    }

    // ---- reverse pass ---------------------------------------------------

    /// Back-propagates from a scalar `loss`, accumulating gradients on every
    /// `requires_grad` leaf, then clears all recorded operations.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract("backward() called twice without a new forward pass".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward() on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!("backward() needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<Real>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].value.accumulate_grad(&g);
                continue;
            }
            self.backward_node(id, &g, &mut grads);
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.op = Op::Cleared;
                node.value = Tensor::zeros([0]);
            }
        }
        self.consumed = true;
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [Real])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[id].value.data();
        match &nodes[id].op {
            Op::Leaf | Op::Cleared => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = nodes[b.0].value.shape()[1];
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                acc(*a, &mut |da| gemm(m, n, k, 1.0, (g, n as isize, 1), (val(*b), 1, n as isize), 1.0, da));
                acc(*b, &mut |db| gemm(k, m, n, 1.0, (val(*a), 1, k as isize), (g, n as isize, 1), 1.0, db));
            }
            Op::Transpose(x) => {
                let (r, c) = nodes[x.0].value.dims2().unwrap();
                acc(*x, &mut |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Spmv { mat, x } => {
                let k = nodes[x.0].value.shape()[1];
                acc(*x, &mut |dx| mat.mul_transpose_add(g, k, dx));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |d| {
                    for ((o, gv), bv) in d.iter_mut().zip(g).zip(val(*b)) {
                        *o += gv * bv;
                    }
                });
                acc(*b, &mut |d| {
                    for ((o, gv), av) in d.iter_mut().zip(g).zip(val(*a)) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(o, v)| *o += s * v)),
            Op::AddBias(x, bias) => {
                acc(*x, &mut |d| add_into(d, g));
                let c = nodes[bias.0].value.numel();
                acc(*bias, &mut |d| {
                    for row in g.chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::Relu(x) => acc(*x, &mut |d| {
                for ((o, gv), xv) in d.iter_mut().zip(g).zip(val(*x)) {
                    if *xv > 0.0 {
                        *o += gv;
                    }
                }
            }),
            Op::LeakyRelu(x, slope) => acc(*x, &mut |d| {
                for ((o, gv), xv) in d.iter_mut().zip(g).zip(val(*x)) {
                    *o += if *xv > 0.0 { *gv } else { slope * gv };
                }
            }),
            Op::Softmax { x, outer, len, inner } => acc(*x, &mut |d| {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: Real = (0..*len).map(|k| g[at(k)] * out[at(k)]).sum();
                        for k in 0..*len {
                            d[at(k)] += out[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
            }),
            Op::SumAll(x) => acc(*x, &mut |d| d.iter_mut().for_each(|o| *o += g[0])),
            Op::SumSquares(x) => acc(*x, &mut |d| {
                for (o, xv) in d.iter_mut().zip(val(*x)) {
                    *o += 2.0 * xv * g[0];
                }
            }),
            Op::SumAxis { x, outer, len, inner } => acc(*x, &mut |d| {
                for o in 0..*outer {
                    for k in 0..*len {
                        for i in 0..*inner {
                            d[(o * len + k) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }),
            Op::MaxAxis { x, argmax } | Op::Gather { x, argmax } => acc(*x, &mut |d| {
                for (gv, &src) in g.iter().zip(argmax) {
                    d[src] += gv;
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Concat { inputs, outer, lens, inner } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (v, &len) in inputs.iter().zip(lens) {
                    acc(*v, &mut |d| {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut d[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, outer, len, inner, start } => {
                let taken = g.len() / (outer * inner).max(1);
                acc(*x, &mut |d| {
                    for o in 0..*outer {
                        let dst = &mut d[(o * len + start) * inner..(o * len + start + taken) * inner];
                        add_into(dst, &g[o * taken * inner..(o + 1) * taken * inner]);
                    }
                });
            }
            Op::GatherRows { x, idx, cols } => acc(*x, &mut |d| {
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut d[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }),
            Op::Conv2d { x, kernel, geom, cout } => {
                let hw = geom.h * geom.w;
                let plen = geom.patch_len();
                let cols = geom.im2col(val(*x));
                acc(*kernel, &mut |dk| {
                    gemm(plen, hw, *cout, 1.0, (&cols, 1, plen as isize), (g, *cout as isize, 1), 1.0, dk)
                });
                acc(*x, &mut |dx| {
                    let mut dcols = vec![0.0; hw * plen];
                    gemm(
                        hw,
                        *cout,
                        plen,
                        1.0,
                        (g, *cout as isize, 1),
                        (val(*kernel), 1, *cout as isize),
                        0.0,
                        &mut dcols,
                    );
                    geom.col2im_add(&dcols, dx);
                });
            }
            Op::BatchNorm { x, gamma, beta, outer, len, inner, x_hat, inv_std, train } => {
                let at = |o: usize, k: usize, i: usize| (o * len + k) * inner + i;
                let count = (outer * inner) as Real;
                let mut sum_g = vec![0.0; *len];
                let mut sum_gx = vec![0.0; *len];
                for o in 0..*outer {
                    for k in 0..*len {
                        for i in 0..*inner {
                            let p = at(o, k, i);
                            sum_g[k] += g[p];
                            sum_gx[k] += g[p] * x_hat[p];
                        }
                    }
                }
                acc(*gamma, &mut |d| add_into(d, &sum_gx));
                acc(*beta, &mut |d| add_into(d, &sum_g));
                let gam = val(*gamma);
                acc(*x, &mut |d| {
                    for o in 0..*outer {
                        for k in 0..*len {
                            for i in 0..*inner {
                                let p = at(o, k, i);
                                d[p] += if *train {
                                    gam[k] * inv_std[k] / count * (count * g[p] - sum_g[k] - x_hat[p] * sum_gx[k])
                                } else {
                                    gam[k] * inv_std[k] * g[p]
                                };
                            }
                        }
                    }
                });
            }
            Op::LocalSecondOrder { x, groups, f, scaled } => {
                let f = *f;
                let ff = f * f;
                let src = val(*x);
                acc(*x, &mut |d| {
                    let mut sym = vec![0.0; ff];
                    for (r, group) in groups.iter().enumerate() {
                        let inv = 1.0 / group.len() as Real;
                        let gs = &g[r * ff..(r + 1) * ff];
                        let sc = &scaled[r * ff..(r + 1) * ff];
                        for a in 0..f {
                            for b in 0..f {
                                let ab = a * f + b;
                                let ba = b * f + a;
                                sym[ab] = inv
                                    * (gs[ab] * signed_sqrt_grad(sc[ab], SIGNED_SQRT_EPS)
                                        + gs[ba] * signed_sqrt_grad(sc[ba], SIGNED_SQRT_EPS));
                            }
                        }
                        for &j in group {
                            let row = &src[j * f..(j + 1) * f];
                            let dst = &mut d[j * f..(j + 1) * f];
                            for a in 0..f {
                                let s: Real = sym[a * f..(a + 1) * f].iter().zip(row).map(|(m, xb)| m * xb).sum();
                                dst[a] += s;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, probs, targets, count } => {
                let p = nodes[logits.0].value.shape()[1];
                let scale = g[0] / *count as Real;
                acc(*logits, &mut |d| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..p {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            d[r * p + c] += scale * (probs[r * p + c] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [Real], src: &[Real]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
