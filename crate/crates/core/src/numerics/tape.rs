//! Reverse-mode differentiation over a linear record of eagerly evaluated ops.
//!
//! Every op computes its value immediately and appends a node. Nodes whose
//! inputs carry no gradient are recorded as constants and skipped on the
//! backward sweep, so frozen sub-graphs cost nothing beyond their forward.

use super::gemm::{gemm, MatRef};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    SigmoidScaled(Var, f64),
    Lerp { a: Var, b: Var, alpha: Var },
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, index: Vec<usize> },
    MeanRows(Var),
    Sum(Var),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => {
                vec![*a, *b]
            }
            Scale(x, _) | Relu(x) | Gelu(x) | SigmoidScaled(x, _) | SoftmaxRows(x) | MeanRows(x)
            | Sum(x) | Reshape(x) => vec![*x],
            Lerp { a, b, alpha } => vec![*a, *b, *alpha],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            ConcatRows(parts) | ConcatCols(parts) => parts.clone(),
            SliceRows { x, .. } | SliceCols { x, .. } | GatherRows { x, .. } => vec![*x],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Single-owner record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    spent: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
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

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        let tracked = op.inputs().iter().any(|&i| self.tracks(i));
        value.requires_grad = tracked;
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn build(&mut self, shape: &[usize], data: Vec<f64>, op: Op) -> Var {
        let t = Tensor::new(shape, data).expect("op produced consistent shape");
        self.push(t, op)
    }

    /// Records a leaf. Its `requires_grad` flag decides whether gradients flow to it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let tracked = tensor.requires_grad;
        let mut t = tensor;
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        self.nodes.last_mut().unwrap().value.requires_grad = tracked;
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 || tb.shape().len() != 2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(ta.data(), m, k),
            MatRef::new(tb.data(), k, n),
            &mut out,
            false,
        );
        Ok(self.build(&[m, n], out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n, k2) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::shape("matmul_nt", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(ta.data(), m, k),
            MatRef::new(tb.data(), n, k).t(),
            &mut out,
            false,
        );
        Ok(self.build(&[m, n], out, Op::MatMulNt(a, b)))
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        Ok(self.build(&shape, data, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let c = tx.cols();
        if tr.numel() != c {
            return Err(Error::shape("add_row", tx.shape(), tr.shape()));
        }
        let r = tr.data();
        let data = tx
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let shape = tx.shape().to_vec();
        Ok(self.build(&shape, data, Op::AddRow(x, row)))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let shape = tx.shape().to_vec();
        self.build(&shape, data, op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    /// `sigmoid(x · scale)` elementwise.
    pub fn sigmoid_scaled(&mut self, x: Var, scale: f64) -> Var {
        self.map(x, |v| sigmoid(v * scale), Op::SigmoidScaled(x, scale))
    }

    /// `alpha · a + (1 − alpha) · b` with a single-element `alpha`.
    pub fn lerp(&mut self, a: Var, b: Var, alpha: Var) -> Result<Var> {
        let talpha = self.value(alpha);
        if talpha.numel() != 1 {
            return Err(Error::shape("lerp", talpha.shape(), &[1]));
        }
        let w = talpha.item();
        self.zip_same(a, b, "lerp", move |x, y| w * x + (1.0 - w) * y, Op::Lerp { a, b, alpha })
    }

    // ---- row-wise -------------------------------------------------------

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut total = 0.0;
            for &v in row {
                let e = (v - max).exp();
                total += e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v /= total;
            }
        }
        let shape = tx.shape().to_vec();
        self.build(&shape, data, Op::SoftmaxRows(x))
    }

    /// Normalises over the last axis then applies `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        if tg.numel() != d {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        if tb.numel() != d {
            return Err(Error::shape("layer_norm", tx.shape(), tb.shape()));
        }
        let (g, b) = (tg.data(), tb.data());
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let shape = tx.shape().to_vec();
        Ok(self.build(
            &shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; c];
        for row in tx.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.build(&[1, c], out, Op::MeanRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.build(&[], vec![s], Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if shape.iter().product::<usize>() != tx.numel() {
            return Err(Error::shape("reshape", tx.shape(), shape));
        }
        let data = tx.data().to_vec();
        Ok(self.build(shape, data, Op::Reshape(x)))
    }

    // ---- structural -----------------------------------------------------

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(Error::shape("concat_rows", self.value(first).shape(), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        Ok(self.build(&[rows, c], data, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let r = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != r {
                return Err(Error::shape("concat_cols", self.value(first).shape(), t.shape()));
            }
            widths.push(t.cols());
        }
        let c: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.build(&[r, c], data, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if len == 0 || start + len > tx.rows() {
            return Err(Error::shape("slice_rows", tx.shape(), &[start, len]));
        }
        let data = tx.data()[start * c..(start + len) * c].to_vec();
        Ok(self.build(&[len, c], data, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", tx.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in tx.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.build(&[r, len], data, Op::SliceCols { x, start }))
    }

    /// Picks rows by index (embedding lookup, candidate selection).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if index.is_empty() {
            return Err(Error::Contract("gather_rows with empty index".into()));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(Error::Input(format!("row index {i} out of range for {r} rows")));
            }
            data.extend_from_slice(tx.row(i));
        }
        Ok(self.build(
            &[index.len(), c],
            data,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Softmax cross-entropy of all elements of `logits` against `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        if target >= t.numel() {
            return Err(Error::Input(format!(
                "target {target} out of range for {} logits",
                t.numel()
            )));
        }
        let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = t.data().iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let loss = z.ln() + max - t.data()[target];
        let probs = exps.into_iter().map(|e| e / z).collect();
        Ok(self.build(
            &[],
            vec![loss],
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Gradient of the last `backward` target with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy of a leaf's value with its gradient attached.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.value(v).clone();
        t.grad = self.grad(v).map(<[f64]>::to_vec);
        t
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.spent = false;
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.spent {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        self.spent = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !lt.requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.value.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let tracked = |v: Var| nodes[v.0].value.requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !tracked(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let gm = MatRef::new(g, m, n);
                acc(*a, &mut |s| gemm(gm, MatRef::new(tb.data(), k, n).t(), s, true));
                acc(*b, &mut |s| gemm(MatRef::new(ta.data(), m, k).t(), gm, s, true));
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                let gm = MatRef::new(g, m, n);
                acc(*a, &mut |s| gemm(gm, MatRef::new(tb.data(), n, k), s, true));
                acc(*b, &mut |s| gemm(gm.t(), MatRef::new(ta.data(), m, k), s, true));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |s| {
                    for ((o, gv), y) in s.iter_mut().zip(g).zip(tb) {
                        *o += gv * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((o, gv), x) in s.iter_mut().zip(g).zip(ta) {
                        *o += gv * x;
                    }
                });
            }
            Op::AddRow(x, r) => {
                acc(*x, &mut |s| add_into(s, g));
                let c = out.cols();
                acc(*r, &mut |s| {
                    for chunk in g.chunks(c) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |s| {
                s.iter_mut().zip(g).for_each(|(o, v)| *o += c * v);
            }),
            Op::Relu(x) => {
                let tx = val(*x).data();
                acc(*x, &mut |s| {
                    for ((o, gv), xv) in s.iter_mut().zip(g).zip(tx) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let tx = val(*x).data();
                acc(*x, &mut |s| {
                    for ((o, gv), xv) in s.iter_mut().zip(g).zip(tx) {
                        *o += gv * gelu_grad(*xv);
                    }
                });
            }
            Op::SigmoidScaled(x, c) => {
                let y = out.data();
                acc(*x, &mut |s| {
                    for ((o, gv), yv) in s.iter_mut().zip(g).zip(y) {
                        *o += gv * yv * (1.0 - yv) * c;
                    }
                });
            }
            Op::Lerp { a, b, alpha } => {
                let w = val(*alpha).item();
                let (ta, tb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(o, v)| *o += w * v));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(o, v)| *o += (1.0 - w) * v));
                acc(*alpha, &mut |s| {
                    s[0] += g
                        .iter()
                        .zip(ta.iter().zip(tb))
                        .map(|(gv, (x, y))| gv * (x - y))
                        .sum::<f64>();
                });
            }
            Op::SoftmaxRows(x) => {
                let c = out.cols();
                let y = out.data();
                acc(*x, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let gam = val(*gamma).data();
                acc(*beta, &mut |s| {
                    for chunk in g.chunks(d) {
                        add_into(s, chunk);
                    }
                });
                acc(*gamma, &mut |s| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, gv), h) in s.iter_mut().zip(grow).zip(hrow) {
                            *o += gv * h;
                        }
                    }
                });
                acc(*x, &mut |s| {
                    let n = d as f64;
                    for (((srow, grow), hrow), inv) in s
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .zip(inv_std)
                    {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = grow[j] * gam[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[j];
                        }
                        for j in 0..d {
                            let dh = grow[j] * gam[j];
                            srow[j] += inv / n * (n * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    acc(p, &mut |s| add_into(s, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let c = out.cols();
                let mut col = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &mut |s| {
                        for (srow, grow) in s.chunks_mut(w).zip(g.chunks(c)) {
                            add_into(srow, &grow[col..col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                acc(*x, &mut |s| add_into(&mut s[start * c..start * c + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let (w, c) = (out.cols(), val(*x).cols());
                acc(*x, &mut |s| {
                    for (srow, grow) in s.chunks_mut(c).zip(g.chunks(w)) {
                        add_into(&mut srow[*start..start + w], grow);
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let c = out.cols();
                acc(*x, &mut |s| {
                    for (k, &row) in index.iter().enumerate() {
                        add_into(&mut s[row * c..(row + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::MeanRows(x) => {
                let tx = val(*x);
                let (r, c) = (tx.rows(), tx.cols());
                acc(*x, &mut |s| {
                    for srow in s.chunks_mut(c) {
                        for (o, gv) in srow.iter_mut().zip(g) {
                            *o += gv / r as f64;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|o| *o += g[0])),
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => acc(*logits, &mut |s| {
                for (k, (o, p)) in s.iter_mut().zip(probs).enumerate() {
                    let onehot = if k == *target { 1.0 } else { 0.0 };
                    *o += g[0] * (p - onehot);
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
