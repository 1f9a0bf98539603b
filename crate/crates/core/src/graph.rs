//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes in execution
//! order, so node ids are already a topological order. [`Graph::backward`]
//! walks the tape once in reverse and returns a [`Gradients`] table holding
//! `∂loss/∂leaf` for every leaf created with `requires_grad`.
//!
//! Binary elementwise ops broadcast their right operand along leading axes:
//! a `[d]` or `[1, d]` bias can be added to a `[T, d]` activation, and the
//! gradient of the broadcast operand is sum-reduced back to its own shape.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Differentiable operation kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Gelu,
    Square,
    Abs,
    SoftmaxRows,
    LayerNorm,
    Concat,
    Narrow,
    Sum,
    Mean,
    MeanRows,
    Unfold,
    Reshape,
    CrossEntropy,
    BceWithLogits,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Square,
        OpKind::Abs,
        OpKind::SoftmaxRows,
        OpKind::LayerNorm,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MeanRows,
        OpKind::Unfold,
        OpKind::Reshape,
        OpKind::CrossEntropy,
        OpKind::BceWithLogits,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Square => "square",
            OpKind::Abs => "abs",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MeanRows => "mean_rows",
            OpKind::Unfold => "unfold",
            OpKind::Reshape => "reshape",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::BceWithLogits => "bce_with_logits",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }
}

static FAULTS: AtomicU64 = AtomicU64::new(0);

/// Test hook: corrupts the backward rule of `kind` process-wide by scaling
/// its input gradients by 1.5. Used to prove the gradient checker fails.
#[doc(hidden)]
pub fn inject_backward_fault(kind: OpKind) {
    FAULTS.fetch_or(1 << kind as u8, Ordering::SeqCst);
}

#[doc(hidden)]
pub fn clear_backward_faults() {
    FAULTS.store(0, Ordering::SeqCst);
}

fn fault_factor(kind: OpKind) -> f64 {
    if FAULTS.load(Ordering::Relaxed) & (1 << kind as u8) != 0 {
        1.5
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Gelu,
    Square,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Binary(Binary, usize, usize),
    Scale(usize, f64),
    Unary(Unary, usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    Unfold {
        x: usize,
        kernel: usize,
    },
    Reshape(usize),
    CrossEntropy {
        logits: usize,
        probs: Vec<f64>,
        label: usize,
    },
    BceWithLogits {
        logits: usize,
        targets: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Binary(Binary::Add, ..) => OpKind::Add,
            Op::Binary(Binary::Sub, ..) => OpKind::Sub,
            Op::Binary(Binary::Mul, ..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Unary(Unary::Relu, _) => OpKind::Relu,
            Op::Unary(Unary::Gelu, _) => OpKind::Gelu,
            Op::Unary(Unary::Square, _) => OpKind::Square,
            Op::Unary(Unary::Abs, _) => OpKind::Abs,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::Unfold { .. } => OpKind::Unfold,
            Op::Reshape(_) => OpKind::Reshape,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of tensor operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    /// Raw gradient buffer, `None` when the node received no gradient.
    pub fn slice(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Right operand broadcast along leading axes of the left operand.
fn broadcastable(lhs: &[usize], rhs: &[usize]) -> bool {
    let mut r = rhs;
    while r.len() > 1 && r[0] == 1 {
        r = &r[1..];
    }
    r.len() <= lhs.len() && lhs[lhs.len() - r.len()..] == *r
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = libm::exp(x - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise softmax of a plain tensor (no graph).
pub fn softmax_rows_of(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    let c = x.cols();
    for (i, o) in out.data_mut().chunks_mut(c).enumerate() {
        softmax_row(&x.data()[i * c..(i + 1) * c], o);
    }
    out
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(op.kind().name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, Op::MatMul(a.0, b.0), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::shape("transpose", xv.shape(), &[2]));
        }
        let out = xv.transpose();
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Transpose(x.0), rg)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcastable(av.shape(), bv.shape()) {
            return Err(Error::shape(name, av.shape(), bv.shape()));
        }
        let bn = bv.len();
        let bd = bv.data();
        let mut out = av.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let y = bd[i % bn];
            match kind {
                Binary::Add => *o += y,
                Binary::Sub => *o -= y,
                Binary::Mul => *o *= y,
            }
        }
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, Op::Binary(kind, a.0, b.0), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Scale(x.0, c), rg)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| match kind {
            Unary::Relu => v.max(0.0),
            Unary::Gelu => gelu(v),
            Unary::Square => v * v,
            Unary::Abs => libm::fabs(v),
        });
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Unary(kind, x.0), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    /// Softmax over the last axis, stabilised by subtracting each row's max.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows_of(self.value(x));
        let rg = self.rg(&[x.0]);
        self.push(out, Op::SoftmaxRows(x.0), rg)
    }

    /// Normalises each row to zero mean and unit variance, then applies
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let xv = self.value(x);
        let d = xv.cols();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != d || bv.len() != d {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = Tensor::zeros(xv.shape());
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out.data_mut()[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, inner) = outer_inner(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::Concat { inputs: ids, axis }, rg)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("narrow", s, &[axis, start, len]));
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let (outer, inner) = outer_inner(s, axis);
        let src_chunk = s[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * src_chunk + start * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let rg = self.rg(&[x.0]);
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::Narrow { x: x.0, axis, start }, rg)
    }

    /// Inverse of [`Graph::concat`]: cuts `x` into consecutive pieces of the
    /// given widths along `axis`.
    pub fn split(&mut self, x: Var, axis: usize, widths: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.narrow(x, axis, start, w)?);
            start += w;
        }
        if start != self.shape(x)[axis] {
            return Err(Error::shape("split", self.shape(x), widths));
        }
        Ok(out)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::Mean(x.0), rg)
    }

    /// Mean over the leading (time) axis: `[T, d] -> [1, d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (t, d) = (v.rows(), v.cols());
        let mut out = vec![0.0; d];
        for r in 0..t {
            for (o, &x) in out.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o /= t as f64;
        }
        let rg = self.rg(&[x.0]);
        let out = Tensor::new(&[1, d], out)?;
        self.push(out, Op::MeanRows(x.0), rg)
    }

    /// Temporal unfolding for a same-padded 1-D convolution of odd width
    /// `kernel`: row `t` of the `[T, kernel·d]` output holds
    /// `x[t - kernel/2] .. x[t + kernel/2]`, zero outside the sequence.
    pub fn unfold(&mut self, x: Var, kernel: usize) -> Result<Var> {
        if kernel.is_multiple_of(2) {
            return Err(Error::contract("unfold kernel must be odd"));
        }
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(Error::shape("unfold", v.shape(), &[2]));
        }
        let (t, d) = (v.rows(), v.cols());
        let half = (kernel / 2) as isize;
        let mut out = vec![0.0; t * kernel * d];
        for r in 0..t {
            for k in 0..kernel {
                let src = r as isize + k as isize - half;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let dst = r * kernel * d + k * d;
                out[dst..dst + d].copy_from_slice(v.row(src as usize));
            }
        }
        let rg = self.rg(&[x.0]);
        let out = Tensor::new(&[t, kernel * d], out)?;
        self.push(out, Op::Unfold { x: x.0, kernel }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Reshape(x.0), rg)
    }

    /// `-log softmax(logits)[label]` over a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let v = self.value(logits);
        if v.rows() != 1 {
            return Err(Error::shape("cross_entropy", v.shape(), &[1, v.cols()]));
        }
        if label >= v.len() {
            return Err(Error::contract("class label out of range"));
        }
        let mut probs = vec![0.0; v.len()];
        softmax_row(v.data(), &mut probs);
        let max = v.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(v.data().iter().map(|x| libm::exp(x - max)).sum::<f64>());
        let loss = lse - v.data()[label];
        let rg = self.rg(&[logits.0]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                probs,
                label,
            },
            rg,
        )
    }

    /// Sum over classes of the sigmoid binary cross-entropy.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let v = self.value(logits);
        if v.len() != targets.len() {
            return Err(Error::shape("bce_with_logits", v.shape(), &[targets.len()]));
        }
        let loss = v
            .data()
            .iter()
            .zip(targets)
            .map(|(&l, &y)| l.max(0.0) - l * y + libm::log1p(libm::exp(-libm::fabs(l))))
            .sum();
        let rg = self.rg(&[logits.0]);
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits: logits.0,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract("backward requires a scalar loss"));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let f = fault_factor(node.op.kind());
        let nodes = &self.nodes;
        let acc = |id: usize, grads: &mut [Option<Vec<f64>>], fill: &mut dyn FnMut(&mut [f64])| {
            if !nodes[id].requires_grad {
                return;
            }
            let buf = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
            if f == 1.0 {
                fill(buf);
            } else {
                let mut tmp = vec![0.0; buf.len()];
                fill(&mut tmp);
                for (b, t) in buf.iter_mut().zip(tmp) {
                    *b += f * t;
                }
            }
        };
        let val = |id: usize| &nodes[id].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, nn) = (av.rows(), av.cols(), bv.cols());
                acc(*a, grads, &mut |buf| matmul_nt_into(g, bv.data(), buf, m, k, nn));
                acc(*b, grads, &mut |buf| matmul_tn_into(av.data(), g, buf, m, k, nn));
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                acc(*x, grads, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let bn = bv.len();
                match kind {
                    Binary::Add | Binary::Sub => {
                        acc(*a, grads, &mut |buf| {
                            for (o, &gi) in buf.iter_mut().zip(g) {
                                *o += gi;
                            }
                        });
                        let s = if *kind == Binary::Add { 1.0 } else { -1.0 };
                        acc(*b, grads, &mut |buf| {
                            for (i, &gi) in g.iter().enumerate() {
                                buf[i % bn] += s * gi;
                            }
                        });
                    }
                    Binary::Mul => {
                        acc(*a, grads, &mut |buf| {
                            for (i, o) in buf.iter_mut().enumerate() {
                                *o += g[i] * bv.data()[i % bn];
                            }
                        });
                        acc(*b, grads, &mut |buf| {
                            for (i, &gi) in g.iter().enumerate() {
                                buf[i % bn] += gi * av.data()[i];
                            }
                        });
                    }
                }
            }
            Op::Scale(x, c) => acc(*x, grads, &mut |buf| {
                for (o, &gi) in buf.iter_mut().zip(g) {
                    *o += c * gi;
                }
            }),
            Op::Unary(kind, x) => {
                let xv = val(*x);
                acc(*x, grads, &mut |buf| {
                    for ((o, &gi), &xi) in buf.iter_mut().zip(g).zip(xv.data()) {
                        let d = match kind {
                            Unary::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Gelu => gelu_grad(xi),
                            Unary::Square => 2.0 * xi,
                            Unary::Abs => sign(xi),
                        };
                        *o += gi * d;
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                acc(*x, grads, &mut |buf| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            buf[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = val(*gamma);
                let d = gv.len();
                let rows = rstd.len();
                acc(*x, grads, &mut |buf| {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv.data()[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            buf[r * d + j] += rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                });
                acc(*gamma, grads, &mut |buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i % d] += gi * xhat[i];
                    }
                });
                acc(*beta, grads, &mut |buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i % d] += gi;
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, inner) = outer_inner(shape, *axis);
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &id in inputs {
                    let chunk = val(id).shape()[*axis] * inner;
                    acc(id, grads, &mut |buf| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            for (b, &s) in buf[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *b += s;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                let src_shape = val(*x).shape();
                let len = node.value.shape()[*axis];
                let (outer, inner) = outer_inner(src_shape, *axis);
                let src_chunk = src_shape[*axis] * inner;
                acc(*x, grads, &mut |buf| {
                    for o in 0..outer {
                        let base = o * src_chunk + start * inner;
                        let gs = &g[o * len * inner..(o + 1) * len * inner];
                        for (b, &s) in buf[base..base + len * inner].iter_mut().zip(gs) {
                            *b += s;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, grads, &mut |buf| {
                for o in buf.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(x) => acc(*x, grads, &mut |buf| {
                let s = g[0] / buf.len() as f64;
                for o in buf.iter_mut() {
                    *o += s;
                }
            }),
            Op::MeanRows(x) => {
                let t = val(*x).rows();
                let d = g.len();
                acc(*x, grads, &mut |buf| {
                    for r in 0..t {
                        for j in 0..d {
                            buf[r * d + j] += g[j] / t as f64;
                        }
                    }
                });
            }
            Op::Unfold { x, kernel } => {
                let (t, d) = (val(*x).rows(), val(*x).cols());
                let half = (*kernel / 2) as isize;
                acc(*x, grads, &mut |buf| {
                    for r in 0..t {
                        for k in 0..*kernel {
                            let src = r as isize + k as isize - half;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let src = src as usize;
                            let gbase = r * kernel * d + k * d;
                            for j in 0..d {
                                buf[src * d + j] += g[gbase + j];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, grads, &mut |buf| {
                for (o, &gi) in buf.iter_mut().zip(g) {
                    *o += gi;
                }
            }),
            Op::CrossEntropy { logits, probs, label } => acc(*logits, grads, &mut |buf| {
                for (c, o) in buf.iter_mut().enumerate() {
                    let y = if c == *label { 1.0 } else { 0.0 };
                    *o += g[0] * (probs[c] - y);
                }
            }),
            Op::BceWithLogits { logits, targets } => {
                let lv = val(*logits);
                acc(*logits, grads, &mut |buf| {
                    for ((o, &l), &y) in buf.iter_mut().zip(lv.data()).zip(targets) {
                        let s = 1.0 / (1.0 + libm::exp(-l));
                        *o += g[0] * (s - y);
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let a = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(t(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let ia = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(ia), g.value(a));
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let any = g.constant(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.7 - 1.0));
        let zz = g.matmul(z, any).unwrap();
        assert_eq!(g.value(zz), &Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[0.0, 0.0, 0.0], &[100.0, 0.0, 0.0], &[1.0, 2.0, 3.0]]));
        let y = g.softmax_rows(x).unwrap();
        let y = g.value(y);
        for j in 0..3 {
            assert!((y.at(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((y.at(1, 0) - 1.0).abs() < 1e-6);
        // exp-and-normalize oracle
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        let expect = [0.09003, 0.24473, 0.66524];
        for j in 0..3 {
            assert!((y.at(2, j) - e[j] / s).abs() < 1e-12);
            assert!((y.at(2, j) - expect[j]).abs() < 1e-5);
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
        let z = g.constant(Tensor::zeros(&[3]));
        let s = g.add(x, z).unwrap();
        assert_eq!(g.value(s), g.value(x));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[2], vec![3.0, -2.0]).unwrap(), true);
        let sq = g.square(x).unwrap();
        assert_eq!(g.value(sq).data(), &[9.0, 4.0]);
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0, -4.0]);
    }

    #[test]
    fn broadcast_gradient_is_sum_reduced() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[3, 2]), true);
        let b = g.leaf(Tensor::new(&[2], vec![0.5, -0.5]).unwrap(), true);
        let y = g.add(x, b).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 3.0]);
        let bad = g.constant(Tensor::ones(&[3]));
        assert!(g.add(x, bad).is_err());
    }

    #[test]
    fn concat_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let c = g.concat(&[a], 1).unwrap();
        assert_eq!(g.value(c), g.value(a));
        let o = g.constant(Tensor::ones(&[2, 1]));
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let c = g.concat(&[o, z], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let bad = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.concat(&[o, bad], 1).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 2], |i| i as f64), true);
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), Tensor::ones(&[2, 2]));

        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 2], |i| i as f64), true);
        let c = Tensor::from_fn(&[2, 2], |i| 0.5 + i as f64);
        let cv = g.constant(c.clone());
        let y = g.mul(x, cv).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), c);

        assert!(g.backward(y).is_err());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2]), true);
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn unfold_pads_with_zeros() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.0], [2.0], [3.0]]).unwrap());
        let u = g.unfold(x, 3).unwrap();
        assert_eq!(g.value(u).data(), &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[1, 7]));
        assert!(matches!(g.cross_entropy(l, 7), Err(Error::Contract(_))));
    }
}
