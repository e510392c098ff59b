use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, View};
use super::Tensor;
use crate::error::{Error, Result};

/// Arguments of `acosh` below this are a broken invariant, not rounding noise.
const ACOSH_DOMAIN_SLACK: f64 = 1e-9;
/// Lower clamp applied to `acosh` arguments that rounding pushed to or below 1.
pub const ACOSH_FLOOR: f64 = 1.0 + 1e-15;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward = Box<dyn Fn(&[&Tensor], &[f64]) -> Vec<Vec<f64>> + Send>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv1d { x: Var, w: Var, b: Var, kernel: usize, col: Vec<f64> },
    Relu { x: Var, mask: Vec<bool> },
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Acosh { x: Var, clamped: Vec<bool> },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SumSquares(Var),
    Norm { x: Var, guarded: bool },
    Max { x: Var, arg: usize },
    LayerNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Stack(Vec<Var>),
    Index(Var, usize),
    Row(Var, usize),
    BallProject { h: Var, alpha: Var, clipped: bool },
    BallClip { x: Var, clipped: bool, radius: f64 },
    Custom { inputs: Vec<Var>, backward: CustomBackward },
}

/// One branch decision taken by a piecewise primitive.
#[derive(Clone, Debug, PartialEq)]
enum Branch {
    Mask(Vec<bool>),
    Flag(bool),
    Arg(usize),
}

/// Branch decisions recorded on one tape, to be replayed on another.
///
/// Replaying pins every piecewise primitive (ReLU, clamps, guards, argmax,
/// ball rescaling) to the piece chosen when the log was recorded, so a
/// replayed evaluation is smooth in its inputs near the recorded point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BranchLog {
    entries: Vec<Branch>,
}

impl BranchLog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

enum BranchMode {
    Free,
    Record(Vec<Branch>),
    Replay(Vec<Branch>, usize),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run record of primitive operations.
///
/// Nodes are appended in execution order, so inputs always precede the
/// ops that consume them. A tape is single-use: [`Tape::backward`]
/// consumes the recorded graph; node values stay readable afterwards but
/// no further ops can be recorded.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    dropout_rng: Option<ChaCha8Rng>,
    acosh_clamps: usize,
    branches: BranchMode,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the loss with respect to every leaf created by [`Tape::param`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Takes ownership of one gradient, leaving `None` behind.
    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Index of the right-hand operand for leading-axis expansion.
fn suffix_broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<usize> {
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
        return Err(Error::shape(op, format!("{sa:?} vs {sb:?} (rhs must be a trailing sub-shape)")));
    }
    Ok(b.len())
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    /// A tape in evaluation mode: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            dropout_rng: None,
            acosh_clamps: 0,
            branches: BranchMode::Free,
        }
    }

    /// Evaluation tape that records every branch decision.
    pub fn recording_branches() -> Self {
        Self {
            branches: BranchMode::Record(Vec::new()),
            ..Self::new()
        }
    }

    /// Evaluation tape that replays the decisions of `log` in order.
    pub fn replaying(log: &BranchLog) -> Self {
        Self {
            branches: BranchMode::Replay(log.entries.clone(), 0),
            ..Self::new()
        }
    }

    /// Decisions recorded so far; empty unless built by [`Tape::recording_branches`].
    pub fn branch_log(&self) -> BranchLog {
        match &self.branches {
            BranchMode::Record(e) => BranchLog { entries: e.clone() },
            _ => BranchLog::default(),
        }
    }

    fn decide(&mut self, fresh: Branch) -> Result<Branch> {
        match &mut self.branches {
            BranchMode::Free => Ok(fresh),
            BranchMode::Record(log) => {
                log.push(fresh.clone());
                Ok(fresh)
            }
            BranchMode::Replay(log, pos) => {
                let recorded = log.get(*pos).cloned();
                *pos += 1;
                match (recorded, &fresh) {
                    (Some(Branch::Mask(m)), Branch::Mask(f)) if m.len() == f.len() => Ok(Branch::Mask(m)),
                    (Some(Branch::Flag(b)), Branch::Flag(_)) => Ok(Branch::Flag(b)),
                    (Some(Branch::Arg(a)), Branch::Arg(_)) => Ok(Branch::Arg(a)),
                    _ => Err(Error::Numeric("branch replay diverged from the recorded graph".into())),
                }
            }
        }
    }

    fn decide_mask(&mut self, fresh: Vec<bool>) -> Result<Vec<bool>> {
        match self.decide(Branch::Mask(fresh))? {
            Branch::Mask(m) => Ok(m),
            _ => unreachable!(),
        }
    }

    fn decide_flag(&mut self, fresh: bool) -> Result<bool> {
        match self.decide(Branch::Flag(fresh))? {
            Branch::Flag(b) => Ok(b),
            _ => unreachable!(),
        }
    }

    fn decide_arg(&mut self, fresh: usize) -> Result<usize> {
        match self.decide(Branch::Arg(fresh))? {
            Branch::Arg(a) => Ok(a),
            _ => unreachable!(),
        }
    }

    /// A tape in training mode whose dropout masks come from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of `acosh` arguments clamped up to [`ACOSH_FLOOR`] so far.
    pub fn acosh_clamps(&self) -> usize {
        self.acosh_clamps
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn zip_broadcast(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let nb = suffix_broadcast(name, ta, tb)?;
        let data: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % nb]))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, out, &[a, b], op)
    }

    /// Elementwise `a + b`; `b` may be a trailing sub-shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_broadcast("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_broadcast("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_broadcast("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_broadcast("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| scale * v + shift).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("affine", out, &[x], Op::Affine(x, scale))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 0.0)
    }

    /// Rank-2 matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("({m}x{k}) @ ({k2}x{n})")));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], data)?, &[a, b], Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        self.push("transpose", Tensor::new(vec![c, r], data)?, &[x], Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, &[x], Op::Reshape(x))
    }

    /// Same-padded 1-D convolution along the sequence axis.
    ///
    /// `x` is `(len, in)`, `w` is `(kernel, in, out)`, `b` is `(out)`.
    /// The kernel may not be longer than the sequence.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (len, cin) = self.value(x).dims2()?;
        let (kernel, wcin, cout) = match self.value(w).shape() {
            [k, i, o] => (*k, *i, *o),
            s => return Err(Error::shape("conv1d", format!("kernel must be rank 3, got {s:?}"))),
        };
        if wcin != cin {
            return Err(Error::shape("conv1d", format!("input has {cin} channels, kernel expects {wcin}")));
        }
        if kernel == 0 || kernel > len {
            return Err(Error::shape("conv1d", format!("kernel {kernel} vs sequence length {len}")));
        }
        if self.value(b).shape() != [cout] {
            return Err(Error::shape("conv1d", format!("bias {:?} vs {cout} outputs", self.value(b).shape())));
        }
        let col = kernels::im2col(self.value(x).data(), len, cin, kernel);
        let mut data = kernels::matmul(&col, self.value(w).data(), len, kernel * cin, cout);
        let bias = self.value(b).data();
        for row in data.chunks_mut(cout) {
            for (v, bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let out = Tensor::new(vec![len, cout], data)?;
        self.push("conv1d", out, &[x, w, b], Op::Conv1d { x, w, b, kernel, col })
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(name, out, &[x], op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let fresh = self.value(x).data().iter().map(|v| *v > 0.0).collect();
        let mask = self.decide_mask(fresh)?;
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| if *m { *v } else { 0.0 }).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("relu", out, &[x], Op::Relu { x, mask })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "ln",
                detail: format!("argument {v} <= 0"),
            });
        }
        self.map("ln", x, f64::ln, Op::Ln(x))
    }

    /// Inverse hyperbolic cosine.
    ///
    /// Arguments in `[1 - 1e-9, 1 + 1e-15)` are clamped to `1 + 1e-15` and
    /// pass a zero gradient; anything lower is a domain error.
    pub fn acosh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let Some(v) = t.data().iter().find(|v| **v < 1.0 - ACOSH_DOMAIN_SLACK) {
            return Err(Error::Domain {
                op: "acosh",
                detail: format!("argument {v} < 1"),
            });
        }
        let fresh = t.data().iter().map(|&v| v < ACOSH_FLOOR).collect();
        let clamped = self.decide_mask(fresh)?;
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .zip(&clamped)
            .map(|(&v, c)| if *c { ACOSH_FLOOR.acosh() } else { v.max(1.0).acosh() })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let n = clamped.iter().filter(|c| **c).count();
        if n > 0 {
            self.acosh_clamps += n;
            log::trace!("acosh clamped {n} argument(s), total {}", self.acosh_clamps);
        }
        self.push("acosh", out, &[x], Op::Acosh { x, clamped })
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank().max(1) {
            return Err(Error::shape("softmax", format!("axis {axis} of {:?}", t.shape())));
        }
        let shape = if t.rank() == 0 { vec![1] } else { t.shape().to_vec() };
        let (outer, n, inner) = axis_layout(&shape, axis);
        let mut data = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (data[idx(j)] - max).exp();
                    data[idx(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    data[idx(j)] /= sum;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("softmax", out, &[x], Op::Softmax { x, axis })
    }

    /// Numerically stable `log(softmax(x))` along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank().max(1) {
            return Err(Error::shape("log_softmax", format!("axis {axis} of {:?}", t.shape())));
        }
        let shape = if t.rank() == 0 { vec![1] } else { t.shape().to_vec() };
        let (outer, n, inner) = axis_layout(&shape, axis);
        let mut data = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|j| (data[idx(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    data[idx(j)] -= lse;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("log_softmax", out, &[x], Op::LogSoftmax { x, axis })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(m), &[x], Op::Mean(x))
    }

    /// Mean over the leading axis of a rank-2 tensor.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if r == 0 {
            return Err(Error::Empty("mean_rows"));
        }
        let mut data = vec![0.0; c];
        for row in t.data().chunks(c) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= r as f64);
        self.push("mean_rows", Tensor::vector(data), &[x], Op::MeanRows(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push("sum_squares", Tensor::scalar(s), &[x], Op::SumSquares(x))
    }

    /// Euclidean norm of all elements, floored at `eps`.
    pub fn norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).norm();
        let guarded = self.decide_flag(n < eps)?;
        let n = if guarded { eps } else { n };
        self.push("norm", Tensor::scalar(n.max(eps)), &[x], Op::Norm { x, guarded })
    }

    /// Largest element, as a scalar. Gradient flows to the first maximiser.
    pub fn max(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Empty("max"));
        }
        let mut arg = 0;
        for (i, v) in t.data().iter().enumerate() {
            if *v > t.data()[arg] {
                arg = i;
            }
        }
        let arg = self.decide_arg(arg)?;
        let m = self.value(x).data()[arg];
        self.push("max", Tensor::scalar(m), &[x], Op::Max { x, arg })
    }

    /// Normalise each row over the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().ok_or(Error::Empty("layer_norm"))?;
        if n == 0 {
            return Err(Error::Empty("layer_norm"));
        }
        let mut xhat = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(t.len() / n);
        for row in xhat.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let out = Tensor::new(t.shape().to_vec(), xhat.clone())?;
        self.push("layer_norm", out, &[x], Op::LayerNorm { x, xhat, inv_std })
    }

    /// Inverted dropout. Identity on evaluation tapes or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Domain {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() >= rate { keep } else { 0.0 })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("dropout", out, &[x], Op::Dropout { x, mask })
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `(lq, d)`, `k` and `v` are `(lk, d)`; `heads` must divide `d`.
    /// Head `h` attends with columns `[h*d/heads, (h+1)*d/heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (lq, d) = self.value(q).dims2()?;
        let (lk, dk) = self.value(k).dims2()?;
        let (lv, dv) = self.value(v).dims2()?;
        if dk != d || dv != d || lv != lk {
            return Err(Error::shape("attention", format!("q ({lq}x{d}), k ({lk}x{dk}), v ({lv}x{dv})")));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * lq * lk];
        let mut out = vec![0.0; lq * d];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for h in 0..heads {
            let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
            kernels::gemm(
                scale,
                qd,
                View::columns(lq, d, h * dh, dh),
                kd,
                View::columns(lk, d, h * dh, dh).t(),
                0.0,
                p,
                View::dense(lq, lk),
            );
            kernels::softmax_rows(p, lk);
            kernels::gemm(1.0, p, View::dense(lq, lk), vd, View::columns(lk, d, h * dh, dh), 0.0, &mut out, View::columns(lq, d, h * dh, dh));
        }
        let out = Tensor::new(vec![lq, d], out)?;
        self.push("attention", out, &[q, k, v], Op::Attention { q, k, v, heads, probs })
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(Error::Empty("stack"))?;
        let shape = self.value(*first).shape().to_vec();
        let mut data = Vec::with_capacity(xs.len() * self.value(*first).len());
        for x in xs {
            if self.value(*x).shape() != shape.as_slice() {
                return Err(Error::shape("stack", format!("{:?} vs {shape:?}", self.value(*x).shape())));
            }
            data.extend_from_slice(self.value(*x).data());
        }
        let mut out_shape = vec![xs.len()];
        out_shape.extend_from_slice(&shape);
        let out = Tensor::new(out_shape, data)?;
        self.push("stack", out, xs, Op::Stack(xs.to_vec()))
    }

    /// Flat element `i` as a scalar.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = self.value(x);
        let v = *t
            .data()
            .get(i)
            .ok_or_else(|| Error::shape("index", format!("{i} out of {}", t.len())))?;
        self.push("index", Tensor::scalar(v), &[x], Op::Index(x, i))
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, _) = t.dims2()?;
        if i >= r {
            return Err(Error::shape("row", format!("{i} out of {r}")));
        }
        let out = Tensor::vector(t.row(i).to_vec());
        self.push("row", out, &[x], Op::Row(x, i))
    }

    /// `tanh(alpha * |h|) * h / |h|`, rescaled onto radius `max_norm` if it
    /// lands beyond it. The origin maps to the origin.
    pub fn ball_project(&mut self, h: Var, alpha: Var, max_norm: f64) -> Result<Var> {
        let a = self.value(alpha);
        if a.len() != 1 {
            return Err(Error::shape("ball_project", format!("alpha must be scalar, got {:?}", a.shape())));
        }
        let a = a.item();
        if a <= 0.0 {
            return Err(Error::Domain {
                op: "ball_project",
                detail: format!("alpha {a} <= 0"),
            });
        }
        let n = self.value(h).norm();
        let r = (a * n).tanh();
        let clipped = self.decide_flag(n > 0.0 && r > max_norm)?;
        let scale = if n == 0.0 {
            0.0
        } else if clipped {
            max_norm / n
        } else {
            r / n
        };
        let t = self.value(h);
        let data = t.data().iter().map(|v| v * scale).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("ball_project", out, &[h, alpha], Op::BallProject { h, alpha, clipped })
    }

    /// Rescale `x` onto radius `max_norm` when its norm exceeds it.
    pub fn ball_clip(&mut self, x: Var, max_norm: f64) -> Result<Var> {
        let n = self.value(x).norm();
        let clipped = self.decide_flag(n > max_norm)?;
        let t = self.value(x);
        let out = if clipped {
            let s = max_norm / n;
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect())?
        } else {
            t.clone()
        };
        self.push("ball_clip", out, &[x], Op::BallClip { x, clipped, radius: max_norm })
    }

    /// User-defined primitive. `backward` receives the input values and the
    /// output gradient and returns one gradient buffer per input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&[&Tensor], &[f64]) -> Vec<Vec<f64>> + Send + 'static,
    ) -> Result<Var> {
        self.push(
            "custom",
            value,
            inputs,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
        )
    }

    /// Reverse pass from a scalar `loss`, consuming the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        // values stay readable; the recorded ops are dropped
        for node in &mut self.nodes {
            node.op = Op::Leaf;
        }
        self.consumed = true;
        Ok(Gradients { grads: leaf_grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, d: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&d).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(d),
            }
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let nb = val(*b).len();
                let mut db = vec![0.0; nb];
                for (i, gi) in g.iter().enumerate() {
                    db[i % nb] += sign * gi;
                }
                acc(*a, g.to_vec());
                acc(*b, db);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let nb = bd.len();
                let da = g.iter().enumerate().map(|(i, gi)| gi * bd[i % nb]).collect();
                let mut db = vec![0.0; nb];
                for (i, gi) in g.iter().enumerate() {
                    db[i % nb] += gi * ad[i];
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Div(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let nb = bd.len();
                let da = g.iter().enumerate().map(|(i, gi)| gi / bd[i % nb]).collect();
                let mut db = vec![0.0; nb];
                for (i, gi) in g.iter().enumerate() {
                    let bi = bd[i % nb];
                    db[i % nb] -= gi * ad[i] / (bi * bi);
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Affine(x, scale) => acc(*x, g.iter().map(|gi| gi * scale).collect()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let mut da = vec![0.0; m * k];
                kernels::gemm(1.0, g, View::dense(m, n), tb.data(), View::dense(k, n).t(), 0.0, &mut da, View::dense(m, k));
                let mut db = vec![0.0; k * n];
                kernels::gemm(1.0, ta.data(), View::dense(m, k).t(), g, View::dense(m, n), 0.0, &mut db, View::dense(k, n));
                acc(*a, da);
                acc(*b, db);
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                acc(*x, dx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Dropout { x, mask } => acc(*x, g.iter().zip(mask).map(|(gi, m)| gi * m).collect()),
            Op::Conv1d { x, w, b, kernel, col } => {
                let (len, cin) = (val(*x).shape()[0], val(*x).shape()[1]);
                let cout = val(*b).len();
                let width = kernel * cin;
                let mut dw = vec![0.0; width * cout];
                kernels::gemm(1.0, col, View::dense(len, width).t(), g, View::dense(len, cout), 0.0, &mut dw, View::dense(width, cout));
                let mut db = vec![0.0; cout];
                for row in g.chunks(cout) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                if nodes[x.0].requires_grad {
                    let mut dcol = vec![0.0; len * width];
                    kernels::gemm(1.0, g, View::dense(len, cout), val(*w).data(), View::dense(width, cout).t(), 0.0, &mut dcol, View::dense(len, width));
                    let mut dx = vec![0.0; len * cin];
                    kernels::col2im(&dcol, len, cin, *kernel, &mut dx);
                    acc(*x, dx);
                }
                acc(*w, dw);
                acc(*b, db);
            }
            Op::Relu { x, mask } => {
                acc(*x, g.iter().zip(mask).map(|(gi, m)| if *m { *gi } else { 0.0 }).collect());
            }
            Op::Tanh(x) => acc(*x, g.iter().zip(y).map(|(gi, t)| gi * (1.0 - t * t)).collect()),
            Op::Exp(x) => acc(*x, g.iter().zip(y).map(|(gi, e)| gi * e).collect()),
            Op::Ln(x) => acc(*x, g.iter().zip(val(*x).data()).map(|(gi, v)| gi / v).collect()),
            Op::Acosh { x, clamped } => {
                let xd = val(*x).data();
                let dx = g
                    .iter()
                    .zip(xd)
                    .zip(clamped)
                    .map(|((gi, v), c)| if *c { 0.0 } else { gi / (v * v - 1.0).sqrt() })
                    .collect();
                acc(*x, dx);
            }
            Op::Softmax { x, axis } => {
                let shape = if node.value.rank() == 0 { vec![1] } else { node.value.shape().to_vec() };
                let (outer, n, inner) = axis_layout(&shape, *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LogSoftmax { x, axis } => {
                let shape = if node.value.rank() == 0 { vec![1] } else { node.value.shape().to_vec() };
                let (outer, n, inner) = axis_layout(&shape, *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| o * n * inner + j * inner + i;
                        let gsum: f64 = (0..n).map(|j| g[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = g[idx(j)] - y[idx(j)].exp() * gsum;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::MeanRows(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let mut dx = Vec::with_capacity(r * c);
                for _ in 0..r {
                    dx.extend(g.iter().map(|gi| gi / r as f64));
                }
                acc(*x, dx);
            }
            Op::SumSquares(x) => acc(*x, val(*x).data().iter().map(|v| 2.0 * v * g[0]).collect()),
            Op::Norm { x, guarded } => {
                let xd = val(*x).data();
                if *guarded {
                    acc(*x, vec![0.0; xd.len()]);
                } else {
                    let n = y[0];
                    acc(*x, xd.iter().map(|v| g[0] * v / n).collect());
                }
            }
            Op::Max { x, arg } => {
                let mut dx = vec![0.0; val(*x).len()];
                dx[*arg] = g[0];
                acc(*x, dx);
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let n = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; xhat.len()];
                for (r, inv) in inv_std.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    let xr = &xhat[r * n..(r + 1) * n];
                    let gmean = gr.iter().sum::<f64>() / n as f64;
                    let gxmean = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[r * n + j] = inv * (gr[j] - gmean - xr[j] * gxmean);
                    }
                }
                acc(*x, dx);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (lq, d) = (val(*q).shape()[0], val(*q).shape()[1]);
                let lk = val(*k).shape()[0];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![0.0; lq * d];
                let mut dk = vec![0.0; lk * d];
                let mut dv = vec![0.0; lk * d];
                let mut ds = vec![0.0; lq * lk];
                for h in 0..*heads {
                    let p = &probs[h * lq * lk..(h + 1) * lq * lk];
                    let qcols = View::columns(lq, d, h * dh, dh);
                    let kcols = View::columns(lk, d, h * dh, dh);
                    kernels::gemm(1.0, p, View::dense(lq, lk).t(), g, qcols, 1.0, &mut dv, kcols);
                    kernels::gemm(1.0, g, qcols, vd, kcols.t(), 0.0, &mut ds, View::dense(lq, lk));
                    for (prow, drow) in p.chunks(lk).zip(ds.chunks_mut(lk)) {
                        let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                        for (dd, pp) in drow.iter_mut().zip(prow) {
                            *dd = pp * (*dd - dot);
                        }
                    }
                    kernels::gemm(scale, &ds, View::dense(lq, lk), kd, kcols, 1.0, &mut dq, qcols);
                    kernels::gemm(scale, &ds, View::dense(lq, lk).t(), qd, qcols, 1.0, &mut dk, kcols);
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::Stack(xs) => {
                let chunk = g.len() / xs.len();
                for (x, gc) in xs.iter().zip(g.chunks(chunk)) {
                    acc(*x, gc.to_vec());
                }
            }
            Op::Index(x, i) => {
                let mut dx = vec![0.0; val(*x).len()];
                dx[*i] = g[0];
                acc(*x, dx);
            }
            Op::Row(x, i) => {
                let c = val(*x).shape()[1];
                let mut dx = vec![0.0; val(*x).len()];
                dx[i * c..(i + 1) * c].copy_from_slice(g);
                acc(*x, dx);
            }
            Op::BallProject { h, alpha, clipped } => {
                let hd = val(*h).data();
                let a = val(*alpha).item();
                let n = val(*h).norm();
                let gh: f64 = g.iter().zip(hd).map(|(x, y)| x * y).sum();
                if n == 0.0 {
                    // limit of tanh(a n)/n as n -> 0
                    acc(*h, g.iter().map(|gi| a * gi).collect());
                    acc(*alpha, vec![0.0]);
                } else if *clipped {
                    let c = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dh = g.iter().zip(hd).map(|(gi, hi)| c * (gi / n - gh * hi / (n * n * n))).collect();
                    acc(*h, dh);
                    acc(*alpha, vec![0.0]);
                } else {
                    let t = (a * n).tanh();
                    let sech2 = 1.0 - t * t;
                    let s = t / n;
                    let ds = (a * sech2 * n - t) / (n * n);
                    let dh = g.iter().zip(hd).map(|(gi, hi)| s * gi + gh * ds * hi / n).collect();
                    acc(*h, dh);
                    acc(*alpha, vec![sech2 * gh]);
                }
            }
            Op::BallClip { x, clipped, radius } => {
                if *clipped {
                    let xd = val(*x).data();
                    let n = val(*x).norm();
                    let gx: f64 = g.iter().zip(xd).map(|(a, b)| a * b).sum();
                    let dx = g.iter().zip(xd).map(|(gi, xi)| radius * (gi / n - gx * xi / (n * n * n))).collect();
                    acc(*x, dx);
                } else {
                    acc(*x, g.to_vec());
                }
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                for (x, d) in inputs.iter().zip(backward(&vals, g)) {
                    acc(*x, d);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn forward_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        assert_eq!(tape.tanh(z).map(|v| tape.value(v).item()).unwrap(), 0.0);

        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let u = tape.constant(Tensor::scalar(5.0 / 3.0));
        let a = tape.acosh(u).unwrap();
        // acosh(u) = ln(u + sqrt(u^2 - 1)) = ln(5/3 + 4/3)
        let oracle = (5.0f64 / 3.0 + ((25.0f64 / 9.0) - 1.0).sqrt()).ln();
        assert!(close(tape.value(a).item(), oracle, 1e-14));
        assert!(close(tape.value(a).item(), 3f64.ln(), 1e-14));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap().item(), 6.0);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.tanh(x).unwrap();
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap().item(), 1.0);

        // acosh(1 + x) at x = 1, oracle: central difference with step 1e-5
        let f = |x: f64| (1.0 + x).acosh();
        let fd = (f(1.0 + 1e-5) - f(1.0 - 1e-5)) / 2e-5;
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        let u = tape.affine(x, 1.0, 1.0).unwrap();
        let y = tape.acosh(u).unwrap();
        let g = tape.backward(y).unwrap().get(x).unwrap().item();
        assert!(close(g, fd, 1e-8));
        assert!(close(g, 1.0 / 3f64.sqrt(), 1e-12));
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.tanh(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NotScalar(_))));

        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
        assert!(matches!(tape.tanh(x), Err(Error::TapeConsumed)));
    }

    #[test]
    fn forward_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));

        let u = tape.constant(Tensor::scalar(0.5));
        assert!(matches!(tape.acosh(u), Err(Error::Domain { .. })));

        let big = tape.constant(Tensor::scalar(1000.0));
        assert!(matches!(tape.exp(big), Err(Error::NonFinite { .. })));

        let x = tape.constant(Tensor::matrix(2, 1, vec![0.0; 2]).unwrap());
        let w = tape.constant(Tensor::new(vec![3, 1, 1], vec![0.0; 3]).unwrap());
        let bias = tape.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(tape.conv1d(x, w, bias), Err(Error::Shape { .. })));
    }

    #[test]
    fn acosh_at_one_clamps_with_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        let y = tape.acosh(x).unwrap();
        assert_eq!(tape.acosh_clamps(), 1);
        assert!(tape.value(y).item() < 1e-7);
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn constants_do_not_record_ops() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let y = tape.exp(c).unwrap();
        assert!(!tape.requires_grad(y));
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
    }

    #[test]
    fn dropout_is_identity_in_eval_and_scales_in_training() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0; 100]));
        assert_eq!(tape.dropout(x, 0.5).unwrap(), x);

        let mut tape = Tape::training(7);
        let x = tape.param(Tensor::vector(vec![1.0; 1000]));
        let y = tape.dropout(x, 0.5).unwrap();
        let vals = tape.value(y).data();
        assert!(vals.iter().all(|v| *v == 0.0 || *v == 2.0));
        let kept = vals.iter().filter(|v| **v > 0.0).count();
        assert!((400..600).contains(&kept));
    }
}
