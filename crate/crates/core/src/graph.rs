//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Node indices are created in evaluation order, so the tape is already a
//! topological sort and [`Graph::backward`] is a single reverse sweep.
//! A graph is single-threaded; independent graphs may run concurrently.

use crate::kernels::{self, ConvGeometry};
use crate::scalar::Scalar;
use crate::tensor::{numel, Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Scale(Var, S),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, S),
    SumAll(Var),
    SumAxis(Var, usize),
    MaxAxis(Var, Vec<usize>),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LogSumExp(Var, usize),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Take(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Crop2d { input: Var, top: usize, left: usize },
    PairwiseSqDist(Var, Var),
    Conv2d { input: Var, kernel: Var, stride: usize, pad: usize },
    Resize(Var),
    SolveSpd { a: Var, b: Var, factor: Vec<S> },
}

#[derive(Debug, Clone)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    tracked: bool,
}

/// Differentiation tape.
#[derive(Debug, Clone, Default)]
pub struct Graph<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
}

/// Gradients of a scalar root with respect to every tracked node.
#[derive(Debug, Clone)]
pub struct Gradients<S: Scalar = f64> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zeros when no path from the root reaches it.
    pub fn wrt(&self, var: Var) -> Tensor<S> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::IncompatibleShape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.tracked(v)
    }

    /// Leaf whose gradient is requested.
    pub fn variable(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: S) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Untracked copy of `v`: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let value = self.value(x).map(f);
        let tracked = self.tracked(x);
        self.push(value, op, tracked)
    }

    // ---- elementwise -------------------------------------------------------

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape =
            kernels::broadcast_shape(&sa, &sb).ok_or_else(|| shape_err("elementwise", &sa, &sb))?;
        let ma = kernels::broadcast_map(&out_shape, &sa);
        let mb = kernels::broadcast_map(&out_shape, &sb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let f = |x: S, y: S| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let data: Vec<S> = (0..numel(&out_shape))
            .map(|k| {
                let ia = ma.as_ref().map_or(k, |m| m[k]);
                let ib = mb.as_ref().map_or(k, |m| m[k]);
                f(da[ia], db[ib])
            })
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Binary(op, a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -S::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        let c = self.scalar(c);
        self.add(x, c).expect("scalar broadcasts")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, S::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, S::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, S::sqrt, Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| S::one() / (S::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, S::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(S::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: S) -> Var {
        self.unary(
            x,
            |v| if v > S::zero() { v } else { v * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let tracked = self.tracked(x);
        self.push(value, Op::SumAll(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, S::one() / S::lit(n as f64))
    }

    /// Reduces `axis` away (the result has rank one lower).
    pub fn reduce(&mut self, x: Var, op: Reduce, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = kernels::split_axis(&shape, axis)?;
        if n == 0 {
            return Err(invalid("reduce", "empty axis"));
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let data = self.value(x).data();
        let tracked = self.tracked(x);
        match op {
            Reduce::Sum | Reduce::Mean => {
                let mut out = vec![S::zero(); outer * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            out[o * inner + i] += data[(o * n + k) * inner + i];
                        }
                    }
                }
                let v = self.push(Tensor::new(out_shape, out)?, Op::SumAxis(x, axis), tracked);
                Ok(if op == Reduce::Mean {
                    self.scale(v, S::one() / S::lit(n as f64))
                } else {
                    v
                })
            }
            Reduce::Max => {
                let mut out = Vec::with_capacity(outer * inner);
                let mut arg = Vec::with_capacity(outer * inner);
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = o * n * inner + i;
                        for k in 1..n {
                            let idx = (o * n + k) * inner + i;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                        out.push(data[best]);
                        arg.push(best);
                    }
                }
                Ok(self.push(Tensor::new(out_shape, out)?, Op::MaxAxis(x, arg), tracked))
            }
        }
    }

    fn along_axis(
        &mut self,
        x: Var,
        axis: usize,
        reduce: bool,
        f: impl Fn(&[S], &mut [S]),
    ) -> Result<Tensor<S>> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = kernels::split_axis(&shape, axis)?;
        let data = self.value(x).data();
        let mut buf = vec![S::zero(); n];
        let mut res = vec![S::zero(); n];
        let mut out = vec![S::zero(); if reduce { outer * inner } else { data.len() }];
        for o in 0..outer {
            for i in 0..inner {
                for k in 0..n {
                    buf[k] = data[(o * n + k) * inner + i];
                }
                f(&buf, &mut res);
                if reduce {
                    out[o * inner + i] = res[0];
                } else {
                    for k in 0..n {
                        out[(o * n + k) * inner + i] = res[k];
                    }
                }
            }
        }
        let mut out_shape = shape;
        if reduce {
            out_shape.remove(axis);
        }
        Tensor::new(out_shape, out)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.along_axis(x, axis, false, |v, out| {
            let m = v.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for (o, &a) in out.iter_mut().zip(v) {
                *o = (a - m).exp();
                z += *o;
            }
            out.iter_mut().for_each(|o| *o /= z);
        })?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Softmax(x, axis), tracked))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.along_axis(x, axis, false, |v, out| {
            let lse = log_sum_exp(v);
            for (o, &a) in out.iter_mut().zip(v) {
                *o = a - lse;
            }
        })?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::LogSoftmax(x, axis), tracked))
    }

    /// `log Σ exp` along `axis`, computed with max subtraction.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.along_axis(x, axis, true, |v, out| out[0] = log_sum_exp(v))?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::LogSumExp(x, axis), tracked))
    }

    // ---- linear algebra ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            S::zero(),
            &mut out,
            (n as isize, 1),
        );
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(invalid("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(x).data();
        let out = Tensor::from_fn(&[c, r], |k| d[(k % r) * c + k / r]);
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::Transpose(x), tracked))
    }

    /// Solves `A x = b` for symmetric positive definite `A` by Cholesky
    /// factorization, differentiable in both `A` and `b`.
    pub fn solve_spd(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sa[0] != sa[1] || sb != [sa[0]] {
            return Err(shape_err("solve_spd", &sa, &sb));
        }
        let n = sa[0];
        let ad = self.value(a).data();
        for i in 0..n {
            for j in 0..i {
                let (x, y) = (ad[i * n + j], ad[j * n + i]);
                let tol = S::lit(1e-10) * (S::one() + x.abs().max(y.abs()));
                if (x - y).abs() > tol {
                    return Err(invalid("solve_spd", format!("matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        let factor = kernels::cholesky(ad, n)?;
        let x = kernels::cholesky_solve(&factor, n, self.value(b).data());
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::from_vec(x), Op::SolveSpd { a, b, factor }, tracked))
    }

    // ---- structural ----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// Selects rows of a rank-2 tensor (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(invalid("gather_rows", format!("expected rank 2, got {s:?}")));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(invalid("gather_rows", format!("row {r} out of range {}", s[0])));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * s[1]);
        for &r in rows {
            out.extend_from_slice(src.row(r));
        }
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor::new(vec![rows.len(), s[1]], out)?,
            Op::GatherRows(x, rows.to_vec()),
            tracked,
        ))
    }

    /// Gathers flat element indices into a tensor of shape `shape`.
    pub fn take(&mut self, x: Var, flat: &[usize], shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if numel(shape) != flat.len() {
            return Err(shape_err("take", &[flat.len()], shape));
        }
        if let Some(&i) = flat.iter().find(|&&i| i >= src.len()) {
            return Err(invalid("take", format!("index {i} out of range {}", src.len())));
        }
        let out: Vec<S> = flat.iter().map(|&i| src[i]).collect();
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor::new(shape.to_vec(), out)?,
            Op::Take(x, flat.to_vec()),
            tracked,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| invalid("concat", "no inputs"))?)
            .to_vec();
        let (outer, _, inner) = kernels::split_axis(&first, axis)?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let mut a = s.to_vec();
            let mut b = first.clone();
            a.remove(axis);
            b.remove(axis);
            if a != b {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let n = self.shape(x)[axis];
                out.extend_from_slice(&self.value(x).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let tracked = xs.iter().any(|&x| self.tracked(x));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(xs.to_vec(), axis), tracked))
    }

    /// Spatial window `[top, top+h) x [left, left+w)` over the last two axes.
    pub fn crop2d(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(invalid("crop2d", "rank < 2"));
        }
        let (ih, iw) = (s[s.len() - 2], s[s.len() - 1]);
        if top + h > ih || left + w > iw || h == 0 || w == 0 {
            return Err(invalid(
                "crop2d",
                format!("window {h}x{w} at ({top},{left}) exceeds {ih}x{iw}"),
            ));
        }
        let planes = numel(&s[..s.len() - 2]);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(planes * h * w);
        for p in 0..planes {
            for y in top..top + h {
                let row = (p * ih + y) * iw;
                out.extend_from_slice(&d[row + left..row + left + w]);
            }
        }
        let mut shape = s;
        let r = shape.len();
        shape[r - 2] = h;
        shape[r - 1] = w;
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Crop2d { input: x, top, left }, tracked))
    }

    /// Squared Euclidean distances between the rows of `a` (n x d) and `b`
    /// (m x d), computed from explicit differences.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("pairwise_sq_dist", &sa, &sb));
        }
        let (n, m) = (sa[0], sb[0]);
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let ra = va.row(i);
            for j in 0..m {
                out.push(
                    ra.iter()
                        .zip(vb.row(j))
                        .map(|(&x, &y)| (x - y) * (x - y))
                        .sum(),
                );
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::PairwiseSqDist(a, b), tracked))
    }

    // ---- imaging -------------------------------------------------------------

    /// 2-D cross-correlation of `input` (N x C x H x W) with `kernel`
    /// (O x C x kh x kw), zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(shape_err("conv2d", &si, &sk));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        if si[2] + 2 * pad < sk[2] || si[3] + 2 * pad < sk[3] {
            return Err(invalid("conv2d", "kernel larger than padded input"));
        }
        let geo = conv_geometry(&si, &sk, stride, pad);
        let (batch, out_ch) = (si[0], sk[0]);
        let (oh, ow) = (geo.out_h(), geo.out_w());
        let plane = si[1] * si[2] * si[3];
        let mut out = vec![S::zero(); batch * out_ch * oh * ow];
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let (pl, cols) = (geo.patch_len(), oh * ow);
        for nb in 0..batch {
            let col = geo.im2col(&x[nb * plane..(nb + 1) * plane]);
            S::gemm(
                out_ch,
                pl,
                cols,
                S::one(),
                w,
                (pl as isize, 1),
                &col,
                (cols as isize, 1),
                S::zero(),
                &mut out[nb * out_ch * cols..(nb + 1) * out_ch * cols],
                (cols as isize, 1),
            );
        }
        let tracked = self.tracked(input) || self.tracked(kernel);
        Ok(self.push(
            Tensor::new(vec![batch, out_ch, oh, ow], out)?,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
            tracked,
        ))
    }

    /// Half-pixel bilinear resize of the last two axes.
    pub fn resize_bilinear(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || h == 0 || w == 0 || s[s.len() - 2] == 0 || s[s.len() - 1] == 0 {
            return Err(invalid("resize_bilinear", format!("{s:?} -> {h}x{w}")));
        }
        let r = s.len();
        let planes = numel(&s[..r - 2]);
        let out = kernels::resize_forward(self.value(x).data(), planes, (s[r - 2], s[r - 1]), (h, w));
        let mut shape = s;
        shape[r - 2] = h;
        shape[r - 1] = w;
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Resize(x), tracked))
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; root.0 + 1];
        if self.tracked(root) {
            grads[root.0] = Some(vec![S::one()]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).unwrap()))
            .chain(std::iter::repeat(None))
            .take(self.nodes.len())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], v: Var, f: impl FnOnce(&mut [S])) {
        if !self.tracked(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn elementwise_grad(&self, grads: &mut [Option<Vec<S>>], x: Var, g: &[S], f: impl Fn(usize, S) -> S) {
        self.accumulate(grads, x, |gx| {
            for (k, (acc, &gk)) in gx.iter_mut().zip(g).enumerate() {
                *acc += f(k, gk);
            }
        });
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let out_shape = node.value.shape();
                let (va, vb) = (self.value(*a), self.value(*b));
                let ma = kernels::broadcast_map(out_shape, va.shape());
                let mb = kernels::broadcast_map(out_shape, vb.shape());
                let ia = |k: usize| ma.as_ref().map_or(k, |m| m[k]);
                let ib = |k: usize| mb.as_ref().map_or(k, |m| m[k]);
                let (da, db) = (va.data(), vb.data());
                self.accumulate(grads, *a, |ga| {
                    for (k, &gk) in g.iter().enumerate() {
                        ga[ia(k)] += match op {
                            BinaryOp::Add | BinaryOp::Sub => gk,
                            BinaryOp::Mul => gk * db[ib(k)],
                            BinaryOp::Div => gk / db[ib(k)],
                        };
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (k, &gk) in g.iter().enumerate() {
                        gb[ib(k)] += match op {
                            BinaryOp::Add => gk,
                            BinaryOp::Sub => -gk,
                            BinaryOp::Mul => gk * da[ia(k)],
                            BinaryOp::Div => {
                                let d = db[ib(k)];
                                -gk * da[ia(k)] / (d * d)
                            }
                        };
                    }
                });
            }
            Op::Scale(x, c) => self.elementwise_grad(grads, *x, g, |_, gk| gk * *c),
            Op::Exp(x) => self.elementwise_grad(grads, *x, g, |k, gk| gk * y[k]),
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.elementwise_grad(grads, *x, g, |k, gk| gk / xv[k]);
            }
            Op::Sqrt(x) => {
                let half = S::lit(0.5);
                self.elementwise_grad(grads, *x, g, |k, gk| gk * half / y[k]);
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let two = S::lit(2.0);
                self.elementwise_grad(grads, *x, g, |k, gk| gk * two * xv[k]);
            }
            Op::Sigmoid(x) => {
                self.elementwise_grad(grads, *x, g, |k, gk| gk * y[k] * (S::one() - y[k]))
            }
            Op::Tanh(x) => {
                self.elementwise_grad(grads, *x, g, |k, gk| gk * (S::one() - y[k] * y[k]))
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.elementwise_grad(grads, *x, g, |k, gk| {
                    if xv[k] > S::zero() {
                        gk
                    } else {
                        S::zero()
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                self.elementwise_grad(grads, *x, g, |k, gk| {
                    if xv[k] > S::zero() {
                        gk
                    } else {
                        gk * *slope
                    }
                });
            }
            Op::SumAll(x) => self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::SumAxis(x, axis) => {
                let (outer, n, inner) = kernels::split_axis(self.shape(*x), *axis).unwrap();
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for k in 0..n {
                            for j in 0..inner {
                                gx[(o * n + k) * inner + j] += g[o * inner + j];
                            }
                        }
                    }
                });
            }
            Op::MaxAxis(x, arg) => self.accumulate(grads, *x, |gx| {
                for (&src, &gk) in arg.iter().zip(g) {
                    gx[src] += gk;
                }
            }),
            Op::Softmax(x, axis) => {
                self.axis_grad(grads, *x, *axis, g, y, false, |gv, yv, out| {
                    let dot: S = gv.iter().zip(yv).map(|(&a, &b)| a * b).sum();
                    for k in 0..out.len() {
                        out[k] = yv[k] * (gv[k] - dot);
                    }
                })
            }
            Op::LogSoftmax(x, axis) => {
                self.axis_grad(grads, *x, *axis, g, y, false, |gv, yv, out| {
                    let total: S = gv.iter().copied().sum();
                    for k in 0..out.len() {
                        out[k] = gv[k] - yv[k].exp() * total;
                    }
                })
            }
            Op::LogSumExp(x, axis) => {
                let xv = self.value(*x).data().to_vec();
                self.axis_grad(grads, *x, *axis, g, &xv, true, |gv, xs, out| {
                    let lse = log_sum_exp(xs);
                    for k in 0..out.len() {
                        out[k] = gv[0] * (xs[k] - lse).exp();
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // dA = G Bᵀ
                self.accumulate(grads, *a, |ga| {
                    S::gemm(m, n, k, S::one(), g, (n as isize, 1), vb, (1, n as isize), S::one(), ga, (k as isize, 1));
                });
                // dB = Aᵀ G
                self.accumulate(grads, *b, |gb| {
                    S::gemm(k, m, n, S::one(), va, (1, k as isize), g, (n as isize, 1), S::one(), gb, (n as isize, 1));
                });
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                self.accumulate(grads, *x, |gx| {
                    for a in 0..r {
                        for b in 0..c {
                            gx[a * c + b] += g[b * r + a];
                        }
                    }
                });
            }
            Op::Reshape(x) => self.elementwise_grad(grads, *x, g, |_, gk| gk),
            Op::GatherRows(x, rows) => {
                let cols = self.shape(*x)[1];
                self.accumulate(grads, *x, |gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        for c in 0..cols {
                            gx[r * cols + c] += g[k * cols + c];
                        }
                    }
                });
            }
            Op::Take(x, flat) => self.accumulate(grads, *x, |gx| {
                for (&src, &gk) in flat.iter().zip(g) {
                    gx[src] += gk;
                }
            }),
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = kernels::split_axis(node.value.shape(), *axis).unwrap();
                let mut start = 0;
                for &x in xs {
                    let n = self.shape(x)[*axis];
                    self.accumulate(grads, x, |gx| {
                        for o in 0..outer {
                            let src = &g[(o * total + start) * inner..(o * total + start + n) * inner];
                            for (acc, &v) in gx[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *acc += v;
                            }
                        }
                    });
                    start += n;
                }
            }
            Op::Crop2d { input, top, left } => {
                let s = self.shape(*input);
                let r = s.len();
                let (ih, iw) = (s[r - 2], s[r - 1]);
                let os = node.value.shape();
                let (h, w) = (os[r - 2], os[r - 1]);
                let planes = numel(&s[..r - 2]);
                self.accumulate(grads, *input, |gx| {
                    for p in 0..planes {
                        for y in 0..h {
                            for xx in 0..w {
                                gx[(p * ih + top + y) * iw + left + xx] += g[(p * h + y) * w + xx];
                            }
                        }
                    }
                });
            }
            Op::PairwiseSqDist(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, m, d) = (va.shape()[0], vb.shape()[0], va.shape()[1]);
                let two = S::lit(2.0);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j] * two;
                            if gij == S::zero() {
                                continue;
                            }
                            for t in 0..d {
                                ga[i * d + t] += gij * (va.data()[i * d + t] - vb.data()[j * d + t]);
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j] * two;
                            if gij == S::zero() {
                                continue;
                            }
                            for t in 0..d {
                                gb[j * d + t] -= gij * (va.data()[i * d + t] - vb.data()[j * d + t]);
                            }
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let (si, sk) = (self.shape(*input), self.shape(*kernel));
                let geo = conv_geometry(si, sk, *stride, *pad);
                let (batch, out_ch) = (si[0], sk[0]);
                let (pl, cols) = (geo.patch_len(), geo.out_h() * geo.out_w());
                let plane = si[1] * si[2] * si[3];
                let x = self.value(*input).data();
                let w = self.value(*kernel).data();
                let need_w = self.tracked(*kernel);
                let need_x = self.tracked(*input);
                for nb in 0..batch {
                    let gn = &g[nb * out_ch * cols..(nb + 1) * out_ch * cols];
                    if need_w {
                        let col = geo.im2col(&x[nb * plane..(nb + 1) * plane]);
                        self.accumulate(grads, *kernel, |gw| {
                            S::gemm(out_ch, cols, pl, S::one(), gn, (cols as isize, 1), &col, (1, cols as isize), S::one(), gw, (pl as isize, 1));
                        });
                    }
                    if need_x {
                        let mut dcol = vec![S::zero(); pl * cols];
                        S::gemm(pl, out_ch, cols, S::one(), w, (1, pl as isize), gn, (cols as isize, 1), S::zero(), &mut dcol, (cols as isize, 1));
                        self.accumulate(grads, *input, |gx| {
                            geo.col2im_add(&dcol, &mut gx[nb * plane..(nb + 1) * plane]);
                        });
                    }
                }
            }
            Op::Resize(x) => {
                let s = self.shape(*x);
                let r = s.len();
                let os = node.value.shape();
                let planes = numel(&s[..r - 2]);
                self.accumulate(grads, *x, |gx| {
                    kernels::resize_backward(g, planes, (s[r - 2], s[r - 1]), (os[r - 2], os[r - 1]), gx);
                });
            }
            Op::SolveSpd { a, b, factor } => {
                let n = y.len();
                let v = kernels::cholesky_solve(factor, n, g);
                self.accumulate(grads, *b, |gb| {
                    for (acc, &vk) in gb.iter_mut().zip(&v) {
                        *acc += vk;
                    }
                });
                self.accumulate(grads, *a, |ga| {
                    for r in 0..n {
                        for c in 0..n {
                            ga[r * n + c] -= v[r] * y[c];
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn axis_grad(
        &self,
        grads: &mut [Option<Vec<S>>],
        x: Var,
        axis: usize,
        g: &[S],
        aux: &[S],
        reduced: bool,
        f: impl Fn(&[S], &[S], &mut [S]),
    ) {
        let (outer, n, inner) = kernels::split_axis(self.shape(x), axis).unwrap();
        let mut gv = vec![S::zero(); if reduced { 1 } else { n }];
        let mut av = vec![S::zero(); n];
        let mut out = vec![S::zero(); n];
        self.accumulate(grads, x, |gx| {
            for o in 0..outer {
                for j in 0..inner {
                    for k in 0..n {
                        av[k] = aux[(o * n + k) * inner + j];
                    }
                    if reduced {
                        gv[0] = g[o * inner + j];
                    } else {
                        for k in 0..n {
                            gv[k] = g[(o * n + k) * inner + j];
                        }
                    }
                    f(&gv, &av, &mut out);
                    for k in 0..n {
                        gx[(o * n + k) * inner + j] += out[k];
                    }
                }
            }
        });
    }
}

fn conv_geometry(si: &[usize], sk: &[usize], stride: usize, pad: usize) -> ConvGeometry {
    ConvGeometry {
        channels: si[1],
        height: si[2],
        width: si[3],
        kh: sk[2],
        kw: sk[3],
        stride,
        pad,
    }
}

pub(crate) fn log_sum_exp<S: Scalar>(v: &[S]) -> S {
    let m = v.iter().copied().fold(S::neg_infinity(), S::max);
    if m == S::neg_infinity() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<S>().ln()
}
