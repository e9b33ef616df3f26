//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to a [`Graph`] holding its forward value and
//! whatever it needs for the backward pass. [`Graph::backward`] walks the tape
//! in reverse and accumulates adjoints. Nodes whose inputs never depend on a
//! gradient-requiring leaf are marked as such and skipped during backward.
//!
//! Ops are deliberately coarse (a whole convolution, a whole softmax) so the
//! tape stays short and the heavy lifting goes through GEMM.

use crate::error::{CrclError, Result};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 3-D convolution; 2-D convolutions use depth 1 with a 1-deep kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn new(stride: [usize; 3], pad: [usize; 3]) -> Self {
        Self { stride, pad }
    }

    /// 2-D convolution geometry (depth axis untouched).
    pub fn planar(stride: usize, pad: usize) -> Self {
        Self { stride: [1, stride, stride], pad: [0, pad, pad] }
    }

    pub fn out_dim(&self, axis: usize, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad[axis] - kernel) / self.stride[axis] + 1
    }
}

#[derive(Clone, Copy)]
struct AxisView {
    outer: usize,
    n: usize,
    inner: usize,
}

impl AxisView {
    fn of(shape: &[usize], axis: usize) -> Self {
        assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
        Self {
            outer: shape[..axis].iter().product(),
            n: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    #[inline]
    fn idx(&self, o: usize, j: usize, i: usize) -> usize {
        (o * self.n + j) * self.inner + i
    }
}

enum Op {
    Input,
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    LnClamped(Var, f64),
    Reshape(Var),
    SumAll(Var),
    SumAxis(Var, AxisView),
    MaxAxis(Var, AxisView, Vec<usize>),
    Broadcast(Var, AxisView),
    Softmax(Var, AxisView),
    LogSoftmax(Var, AxisView),
    TopkRenorm {
        x: Var,
        view: AxisView,
        mask: Vec<bool>,
        sums: Vec<f64>,
    },
    Linear(Var, Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    ConstLeftMatmul(Var, Tensor),
    NormalizeCols(Var, Vec<f64>),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    AdaptiveAvgPool(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recording of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], retained for leaves only.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant: no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A differentiable leaf (parameter or probe input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    /// `a + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let v = zip(self.value(a), c, |x, y| x + y);
        let ng = self.ng(a);
        self.push(v, Op::AddConst(a), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ct = Tensor::full(self.shape(a), c);
        self.add_const(a, &ct)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(v, Op::LeakyRelu(a, slope), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a).map(|x| x.max(eps).ln());
        let ng = self.ng(a);
        self.push(v, Op::LnClamped(a, eps), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let x = self.value(a);
        let view = AxisView::of(x.shape(), axis);
        let mut out = vec![0.0; view.outer * view.inner];
        let xd = x.data();
        for o in 0..view.outer {
            for j in 0..view.n {
                let row = &xd[view.idx(o, j, 0)..view.idx(o, j, 0) + view.inner];
                for (acc, &val) in out[o * view.inner..(o + 1) * view.inner].iter_mut().zip(row) {
                    *acc += val;
                }
            }
        }
        let shape = removed(x.shape(), axis);
        let ng = self.ng(a);
        self.push(Tensor::from_parts(shape, out), Op::SumAxis(a, view), ng)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let n = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n)
    }

    /// Max over one axis, removing it. Gradient goes to the first maximal entry.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Var {
        let x = self.value(a);
        let view = AxisView::of(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![0.0; view.outer * view.inner];
        let mut arg = vec![0usize; view.outer * view.inner];
        for o in 0..view.outer {
            for i in 0..view.inner {
                let mut best = xd[view.idx(o, 0, i)];
                let mut best_j = 0;
                for j in 1..view.n {
                    let v = xd[view.idx(o, j, i)];
                    if v > best {
                        best = v;
                        best_j = j;
                    }
                }
                out[o * view.inner + i] = best;
                arg[o * view.inner + i] = best_j;
            }
        }
        let shape = removed(x.shape(), axis);
        let ng = self.ng(a);
        self.push(Tensor::from_parts(shape, out), Op::MaxAxis(a, view, arg), ng)
    }

    /// Insert a new axis of length `n` at `axis`, repeating values along it.
    pub fn broadcast(&mut self, a: Var, axis: usize, n: usize) -> Var {
        let x = self.value(a);
        let mut shape = x.shape().to_vec();
        assert!(axis <= shape.len());
        shape.insert(axis, n);
        let view = AxisView::of(&shape, axis);
        let xd = x.data();
        let mut out = vec![0.0; view.outer * n * view.inner];
        for o in 0..view.outer {
            let src = &xd[o * view.inner..(o + 1) * view.inner];
            for j in 0..n {
                let s = view.idx(o, j, 0);
                out[s..s + view.inner].copy_from_slice(src);
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::from_parts(shape, out), Op::Broadcast(a, view), ng)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let x = self.value(a);
        let view = AxisView::of(x.shape(), axis);
        let mut out = x.data().to_vec();
        for o in 0..view.outer {
            for i in 0..view.inner {
                let m = (0..view.n)
                    .map(|j| out[view.idx(o, j, i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..view.n {
                    let e = (out[view.idx(o, j, i)] - m).exp();
                    out[view.idx(o, j, i)] = e;
                    s += e;
                }
                for j in 0..view.n {
                    out[view.idx(o, j, i)] /= s;
                }
            }
        }
        let shape = x.shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a, view), ng)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Var {
        let x = self.value(a);
        let view = AxisView::of(x.shape(), axis);
        let mut out = x.data().to_vec();
        for o in 0..view.outer {
            for i in 0..view.inner {
                let m = (0..view.n)
                    .map(|j| out[view.idx(o, j, i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..view.n)
                    .map(|j| (out[view.idx(o, j, i)] - m).exp())
                    .sum::<f64>()
                    .ln();
                for j in 0..view.n {
                    out[view.idx(o, j, i)] -= lse;
                }
            }
        }
        let shape = x.shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::from_parts(shape, out), Op::LogSoftmax(a, view), ng)
    }

    /// Keep the `k` largest entries along `axis` (ties to the lower index), zero the
    /// rest, and rescale the survivors to sum to one. The selection mask is a
    /// constant under differentiation. Entries are expected to be nonnegative.
    pub fn topk_renorm(&mut self, a: Var, axis: usize, k: usize) -> Var {
        let x = self.value(a);
        let view = AxisView::of(x.shape(), axis);
        assert!(k >= 1 && k <= view.n, "top-k with k={k} over {} entries", view.n);
        let xd = x.data();
        let mut mask = vec![false; xd.len()];
        let mut sums = vec![0.0; view.outer * view.inner];
        let mut out = vec![0.0; xd.len()];
        let mut order: Vec<usize> = Vec::with_capacity(view.n);
        for o in 0..view.outer {
            for i in 0..view.inner {
                order.clear();
                order.extend(0..view.n);
                // Stable sort keeps lower indices first among equal values.
                order.sort_by(|&p, &q| {
                    xd[view.idx(o, q, i)]
                        .partial_cmp(&xd[view.idx(o, p, i)])
                        .unwrap_or(std::cmp::Ordering::Equal)
                });
                let mut s = 0.0;
                for &j in &order[..k] {
                    mask[view.idx(o, j, i)] = true;
                    s += xd[view.idx(o, j, i)];
                }
                sums[o * view.inner + i] = s;
                for &j in &order[..k] {
                    out[view.idx(o, j, i)] = xd[view.idx(o, j, i)] / s;
                }
            }
        }
        let shape = x.shape().to_vec();
        let ng = self.ng(a);
        self.push(
            Tensor::from_parts(shape, out),
            Op::TopkRenorm { x: a, view, mask, sums },
            ng,
        )
    }

    /// `x · wᵀ + b` for `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        assert!(xs.len() == 2 && ws.len() == 2 && bs.len() == 1, "linear shapes {xs:?} {ws:?} {bs:?}");
        let (batch, din, dout) = (xs[0], xs[1], ws[0]);
        assert!(ws[1] == din && bs[0] == dout, "linear shapes {xs:?} {ws:?} {bs:?}");
        let mut out = vec![0.0; batch * dout];
        for r in 0..batch {
            out[r * dout..(r + 1) * dout].copy_from_slice(self.value(b).data());
        }
        matmul_nt(batch, din, dout, self.value(x).data(), self.value(w).data(), &mut out, true);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Tensor::from_parts(vec![batch, dout], out), Op::Linear(x, w, b), ng)
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    /// `A · x_b` for every item of `x: [B, k, n]` with a constant `A: [m, k]`.
    pub fn const_left_matmul(&mut self, lhs: &Tensor, x: Var) -> Var {
        let xs = self.shape(x);
        assert!(lhs.shape().len() == 2 && xs.len() == 3 && lhs.shape()[1] == xs[1]);
        let (m, k) = (lhs.shape()[0], lhs.shape()[1]);
        let (batch, n) = (xs[0], xs[2]);
        let mut out = vec![0.0; batch * m * n];
        let xd = self.value(x).data();
        for bi in 0..batch {
            matmul_nn(m, k, n, lhs.data(), &xd[bi * k * n..(bi + 1) * k * n], &mut out[bi * m * n..(bi + 1) * m * n], false);
        }
        let ng = self.ng(x);
        self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::ConstLeftMatmul(x, lhs.clone()),
            ng,
        )
    }

    /// Scale every column of a 2-D tensor to unit Euclidean norm. Fails on any
    /// column whose norm is at most `eps`.
    pub fn normalize_cols(&mut self, a: Var, eps: f64, which: &'static str) -> Result<Var> {
        let x = self.value(a);
        let s = x.shape();
        assert_eq!(s.len(), 2);
        let (rows, cols) = (s[0], s[1]);
        let xd = x.data();
        let mut norms = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                norms[c] += xd[r * cols + c] * xd[r * cols + c];
            }
        }
        for (c, n) in norms.iter_mut().enumerate() {
            *n = n.sqrt();
            if !(*n > eps) {
                return Err(CrclError::DegenerateColumn { which, column: c, norm: *n, eps });
            }
        }
        let mut out = xd.to_vec();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] /= norms[c];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(vec![rows, cols], out), Op::NormalizeCols(a, norms), ng))
    }

    /// Batched convolution. `x: [B, Cin, D, H, W]`, `w: [Cout, Cin, KD, KH, KW]`, `b: [Cout]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 5 && ws.len() == 5 && xs[1] == ws[1], "conv shapes {xs:?} {ws:?}");
        assert_eq!(self.shape(b), &[ws[0]]);
        let dims = ConvDims::new(&xs, &ws, geom);
        let cols = im2col(self.value(x).data(), &dims);
        let ConvDims { batch, cout, kk, p, .. } = dims;
        let mut tmp = vec![0.0; cout * batch * p];
        matmul_nn(cout, kk, batch * p, self.value(w).data(), &cols, &mut tmp, false);
        let bias = self.value(b).data();
        let mut out = vec![0.0; batch * cout * p];
        for bi in 0..batch {
            for co in 0..cout {
                let src = &tmp[co * batch * p + bi * p..co * batch * p + (bi + 1) * p];
                let dst = &mut out[(bi * cout + co) * p..(bi * cout + co + 1) * p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias[co];
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let shape = vec![batch, cout, dims.out[0], dims.out[1], dims.out[2]];
        self.push(
            Tensor::from_parts(shape, out),
            Op::Conv { x, w, b, geom, cols: ng.then_some(cols) },
            ng,
        )
    }

    /// Average pooling of `[B, C, H, W]` onto an `oh × ow` grid with bins
    /// `[floor(i·H/oh), ceil((i+1)·H/oh))`.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4);
        let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; bc * oh * ow];
        for plane in 0..bc {
            for i in 0..oh {
                let (r0, r1) = pool_bin(i, h, oh);
                for j in 0..ow {
                    let (c0, c1) = pool_bin(j, w, ow);
                    let mut s = 0.0;
                    for r in r0..r1 {
                        for c in c0..c1 {
                            s += xd[(plane * h + r) * w + c];
                        }
                    }
                    out[(plane * oh + i) * ow + j] = s / ((r1 - r0) * (c1 - c0)) as f64;
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::from_parts(vec![xs[0], xs[1], oh, ow], out),
            Op::AdaptiveAvgPool(x),
            ng,
        )
    }

    /// Reverse sweep from a scalar `loss`. Returns adjoints for every leaf that
    /// the loss depends on.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if self.ng(v) {
            let g = f();
            self.acc(grads, v, g);
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                self.acc_with(grads, *a, || zip(g, self.value(*b), |x, y| x * y));
                self.acc_with(grads, *b, || zip(g, self.value(*a), |x, y| x * y));
            }
            Op::Scale(a, c) => self.acc_with(grads, *a, || g.map(|v| v * c)),
            Op::AddConst(a) => self.acc_with(grads, *a, || g.clone()),
            Op::Relu(a) => self.acc_with(grads, *a, || {
                zip(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })
            }),
            Op::LeakyRelu(a, slope) => self.acc_with(grads, *a, || {
                zip(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { slope * gv })
            }),
            Op::Sigmoid(a) => self.acc_with(grads, *a, || {
                zip(g, &node.value, |gv, y| gv * y * (1.0 - y))
            }),
            Op::LnClamped(a, eps) => self.acc_with(grads, *a, || {
                zip(g, self.value(*a), |gv, x| if x > *eps { gv / x } else { 0.0 })
            }),
            Op::Reshape(a) => self.acc_with(grads, *a, || {
                Tensor::from_parts(self.shape(*a).to_vec(), gd.to_vec())
            }),
            Op::SumAll(a) => self.acc_with(grads, *a, || Tensor::full(self.shape(*a), gd[0])),
            Op::SumAxis(a, view) => self.acc_with(grads, *a, || {
                let mut out = vec![0.0; view.outer * view.n * view.inner];
                for o in 0..view.outer {
                    let src = &gd[o * view.inner..(o + 1) * view.inner];
                    for j in 0..view.n {
                        let s = view.idx(o, j, 0);
                        out[s..s + view.inner].copy_from_slice(src);
                    }
                }
                Tensor::from_parts(self.shape(*a).to_vec(), out)
            }),
            Op::MaxAxis(a, view, arg) => self.acc_with(grads, *a, || {
                let mut out = vec![0.0; view.outer * view.n * view.inner];
                for o in 0..view.outer {
                    for i in 0..view.inner {
                        let r = o * view.inner + i;
                        out[view.idx(o, arg[r], i)] = gd[r];
                    }
                }
                Tensor::from_parts(self.shape(*a).to_vec(), out)
            }),
            Op::Broadcast(a, view) => self.acc_with(grads, *a, || {
                let mut out = vec![0.0; view.outer * view.inner];
                for o in 0..view.outer {
                    for j in 0..view.n {
                        let s = view.idx(o, j, 0);
                        for (acc, &v) in out[o * view.inner..(o + 1) * view.inner].iter_mut().zip(&gd[s..s + view.inner]) {
                            *acc += v;
                        }
                    }
                }
                Tensor::from_parts(self.shape(*a).to_vec(), out)
            }),
            Op::Softmax(a, view) => self.acc_with(grads, *a, || {
                let y = node.value.data();
                let mut out = vec![0.0; y.len()];
                for o in 0..view.outer {
                    for i in 0..view.inner {
                        let dot: f64 = (0..view.n).map(|j| gd[view.idx(o, j, i)] * y[view.idx(o, j, i)]).sum();
                        for j in 0..view.n {
                            let t = view.idx(o, j, i);
                            out[t] = y[t] * (gd[t] - dot);
                        }
                    }
                }
                Tensor::from_parts(node.value.shape().to_vec(), out)
            }),
            Op::LogSoftmax(a, view) => self.acc_with(grads, *a, || {
                let y = node.value.data();
                let mut out = vec![0.0; y.len()];
                for o in 0..view.outer {
                    for i in 0..view.inner {
                        let gs: f64 = (0..view.n).map(|j| gd[view.idx(o, j, i)]).sum();
                        for j in 0..view.n {
                            let t = view.idx(o, j, i);
                            out[t] = gd[t] - y[t].exp() * gs;
                        }
                    }
                }
                Tensor::from_parts(node.value.shape().to_vec(), out)
            }),
            Op::TopkRenorm { x, view, mask, sums } => self.acc_with(grads, *x, || {
                let y = node.value.data();
                let mut out = vec![0.0; y.len()];
                for o in 0..view.outer {
                    for i in 0..view.inner {
                        let s = sums[o * view.inner + i];
                        let dot: f64 = (0..view.n).map(|j| gd[view.idx(o, j, i)] * y[view.idx(o, j, i)]).sum();
                        for j in 0..view.n {
                            let t = view.idx(o, j, i);
                            if mask[t] {
                                out[t] = (gd[t] - dot) / s;
                            }
                        }
                    }
                }
                Tensor::from_parts(node.value.shape().to_vec(), out)
            }),
            Op::Linear(x, w, b) => {
                let (batch, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = self.shape(*w)[0];
                self.acc_with(grads, *x, || {
                    let mut out = vec![0.0; batch * din];
                    matmul_nn(batch, dout, din, gd, self.value(*w).data(), &mut out, false);
                    Tensor::from_parts(vec![batch, din], out)
                });
                self.acc_with(grads, *w, || {
                    let mut out = vec![0.0; dout * din];
                    matmul_tn(dout, batch, din, gd, self.value(*x).data(), &mut out, false);
                    Tensor::from_parts(vec![dout, din], out)
                });
                self.acc_with(grads, *b, || {
                    let mut out = vec![0.0; dout];
                    for r in 0..batch {
                        for (o, v) in out.iter_mut().zip(&gd[r * dout..(r + 1) * dout]) {
                            *o += v;
                        }
                    }
                    Tensor::from_parts(vec![dout], out)
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                self.acc_with(grads, *a, || {
                    let mut out = vec![0.0; m * k];
                    matmul_nt(m, n, k, gd, self.value(*b).data(), &mut out, false);
                    Tensor::from_parts(vec![m, k], out)
                });
                self.acc_with(grads, *b, || {
                    let mut out = vec![0.0; k * n];
                    matmul_tn(k, m, n, self.value(*a).data(), gd, &mut out, false);
                    Tensor::from_parts(vec![k, n], out)
                });
            }
            Op::Transpose(a) => self.acc_with(grads, *a, || g.transpose()),
            Op::ConstLeftMatmul(x, lhs) => self.acc_with(grads, *x, || {
                let (m, k) = (lhs.shape()[0], lhs.shape()[1]);
                let xs = self.shape(*x);
                let (batch, n) = (xs[0], xs[2]);
                let mut out = vec![0.0; batch * k * n];
                for bi in 0..batch {
                    matmul_tn(k, m, n, lhs.data(), &gd[bi * m * n..(bi + 1) * m * n], &mut out[bi * k * n..(bi + 1) * k * n], false);
                }
                Tensor::from_parts(xs.to_vec(), out)
            }),
            Op::NormalizeCols(a, norms) => self.acc_with(grads, *a, || {
                let y = node.value.data();
                let cols = norms.len();
                let rows = y.len() / cols;
                let mut dots = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dots[c] += gd[r * cols + c] * y[r * cols + c];
                    }
                }
                let mut out = vec![0.0; y.len()];
                for r in 0..rows {
                    for c in 0..cols {
                        let t = r * cols + c;
                        out[t] = (gd[t] - y[t] * dots[c]) / norms[c];
                    }
                }
                Tensor::from_parts(vec![rows, cols], out)
            }),
            Op::Conv { x, w, b, geom, cols } => {
                let dims = ConvDims::new(self.shape(*x), self.shape(*w), *geom);
                let ConvDims { batch, cout, kk, p, .. } = dims;
                // Permute the output adjoint to [Cout, B·P] to match the column layout.
                let mut gp = vec![0.0; cout * batch * p];
                for bi in 0..batch {
                    for co in 0..cout {
                        gp[co * batch * p + bi * p..co * batch * p + (bi + 1) * p]
                            .copy_from_slice(&gd[(bi * cout + co) * p..(bi * cout + co + 1) * p]);
                    }
                }
                let cols = cols.as_ref().expect("conv columns retained for backward");
                self.acc_with(grads, *w, || {
                    let mut out = vec![0.0; cout * kk];
                    matmul_nt(cout, batch * p, kk, &gp, cols, &mut out, false);
                    Tensor::from_parts(self.shape(*w).to_vec(), out)
                });
                self.acc_with(grads, *b, || {
                    let out = (0..cout).map(|co| gp[co * batch * p..(co + 1) * batch * p].iter().sum()).collect();
                    Tensor::from_parts(vec![cout], out)
                });
                self.acc_with(grads, *x, || {
                    let mut dcols = vec![0.0; kk * batch * p];
                    matmul_tn(kk, cout, batch * p, self.value(*w).data(), &gp, &mut dcols, false);
                    Tensor::from_parts(self.shape(*x).to_vec(), col2im(&dcols, &dims))
                });
            }
            Op::AdaptiveAvgPool(x) => self.acc_with(grads, *x, || {
                let xs = self.shape(*x);
                let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let mut out = vec![0.0; bc * h * w];
                for plane in 0..bc {
                    for i in 0..oh {
                        let (r0, r1) = pool_bin(i, h, oh);
                        for j in 0..ow {
                            let (c0, c1) = pool_bin(j, w, ow);
                            let share = gd[(plane * oh + i) * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                            for r in r0..r1 {
                                for c in c0..c1 {
                                    out[(plane * h + r) * w + c] += share;
                                }
                            }
                        }
                    }
                }
                Tensor::from_parts(xs.to_vec(), out)
            }),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise op on mismatched shapes");
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn removed(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn pool_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

struct ConvDims {
    batch: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    out: [usize; 3],
    geom: ConvGeom,
    /// Rows of the column matrix: Cin·KD·KH·KW.
    kk: usize,
    /// Output positions per item.
    p: usize,
}

impl ConvDims {
    fn new(xs: &[usize], ws: &[usize], geom: ConvGeom) -> Self {
        let input = [xs[2], xs[3], xs[4]];
        let kernel = [ws[2], ws[3], ws[4]];
        for a in 0..3 {
            assert!(
                input[a] + 2 * geom.pad[a] >= kernel[a],
                "kernel {kernel:?} larger than padded input {input:?}"
            );
        }
        let out = [
            geom.out_dim(0, input[0], kernel[0]),
            geom.out_dim(1, input[1], kernel[1]),
            geom.out_dim(2, input[2], kernel[2]),
        ];
        Self {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            input,
            kernel,
            out,
            geom,
            kk: xs[1] * kernel.iter().product::<usize>(),
            p: out.iter().product(),
        }
    }

    /// Visit every (column-row, output position, input offset) triple.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [d, h, w] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.out;
        let [sd, sh, sw] = self.geom.stride;
        let [pd, ph, pw] = self.geom.pad;
        for bi in 0..self.batch {
            for c in 0..self.cin {
                let base = (bi * self.cin + c) * d * h * w;
                for a in 0..kd {
                    for bb in 0..kh {
                        for cc in 0..kw {
                            let row = ((c * kd + a) * kh + bb) * kw + cc;
                            for z in 0..od {
                                let iz = (z * sd + a) as isize - pd as isize;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for y in 0..oh {
                                    let iy = (y * sh + bb) as isize - ph as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let pos_base = (z * oh + y) * ow;
                                    let in_base = base + (iz as usize * h + iy as usize) * w;
                                    for xo in 0..ow {
                                        let ix = (xo * sw + cc) as isize - pw as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        f(row, bi, pos_base + xo, in_base + ix as usize);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col(x: &[f64], dims: &ConvDims) -> Vec<f64> {
    let stride = dims.batch * dims.p;
    let mut cols = vec![0.0; dims.kk * stride];
    dims.for_each(|row, bi, pos, src| {
        cols[row * stride + bi * dims.p + pos] = x[src];
    });
    cols
}

fn col2im(cols: &[f64], dims: &ConvDims) -> Vec<f64> {
    let stride = dims.batch * dims.p;
    let mut x = vec![0.0; dims.batch * dims.cin * dims.input.iter().product::<usize>()];
    dims.for_each(|row, bi, pos, dst| {
        x[dst] += cols[row * stride + bi * dims.p + pos];
    });
    x
}
