//! Reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every step (define-by-run). Nodes are
//! appended in creation order, so parents always precede children and a single
//! reverse sweep visits nodes in topological order. Values are filled by
//! [`Graph::forward`]; gradients by [`Graph::backward`]. When a node feeds
//! several consumers its gradient is the sum of their contributions, which is
//! what lets a recurrent weight shared across time steps accumulate correctly.
//!
//! Batch normalization is a single fused node. In training mode its backward
//! rule carries the mean and variance terms explicitly:
//!
//! ```text
//! dx_i = inv_std / n * (n * dxhat_i - sum_j dxhat_j - xhat_i * sum_j dxhat_j * xhat_j)
//! ```
//!
//! where the sums run over the unmasked rows only.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::normalization::{masked_statistics, BatchStats};
use crate::tensor::{Binary, Tensor, Unary};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Gradients keyed by parameter name. Ordered so iteration is deterministic.
pub type Gradients = BTreeMap<String, Tensor>;

/// A named trainable tensor together with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { name: name.into(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.shape());
    }
}

/// Anything that owns named parameters.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grads(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    /// Zeroes every accumulator, then adds in `grads`.
    fn load_grads(&mut self, grads: &Gradients) -> Result<()> {
        for p in self.parameters_mut() {
            p.zero_grad();
            if let Some(g) = grads.get(&p.name) {
                p.grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value.numel()).sum()
    }
}

/// Statistics source for a batch-norm node.
#[derive(Debug, Clone)]
pub enum BnStatistics {
    /// Compute mean/variance from the (masked) rows of the input.
    Batch,
    /// Use the given mean/variance as constants.
    Fixed { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(String),
    Input(String),
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Reshape(Var, Vec<usize>),
    SliceOuter(Var, usize, usize),
    ConcatOuter(Vec<Var>),
    SliceLast(Var, usize, usize),
    ConcatLast(Vec<Var>),
    Gather(Var, Vec<usize>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mask: Option<Vec<f64>>,
        eps: f64,
        stats: BnStatistics,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Input(_) => "input",
            Op::MatMul(..) => "matmul",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Unary(..) => "unary",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::Reshape(..) => "reshape",
            Op::SliceOuter(..) => "slice_outer",
            Op::ConcatOuter(..) => "concat_outer",
            Op::SliceLast(..) => "slice_last",
            Op::ConcatLast(..) => "concat_last",
            Op::Gather(..) => "gather",
            Op::BatchNorm { .. } => "batch_norm",
            Op::SoftmaxCrossEntropy { .. } => "softmax_xent",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param(_) | Op::Input(_) => vec![],
            Op::MatMul(a, b) | Op::Binary(_, a, b) => vec![*a, *b],
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::Reshape(a, _)
            | Op::SliceOuter(a, ..)
            | Op::SliceLast(a, ..)
            | Op::Gather(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::ConcatOuter(v) | Op::ConcatLast(v) => v.clone(),
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Quantities saved by the forward pass of a batch-norm node.
#[derive(Debug, Clone)]
struct BnSaved {
    xhat: Tensor,
    inv_std: Vec<f64>,
    stats: BatchStats,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    grad: Option<Tensor>,
    requires_grad: bool,
    bn: Option<BnSaved>,
    probs: Option<Tensor>,
}

/// Read-only view of a node for inspection.
#[derive(Debug)]
pub struct NodeInfo<'a> {
    pub id: usize,
    pub kind: &'static str,
    pub parents: Vec<usize>,
    pub value: Option<&'a Tensor>,
    pub gradient: Option<&'a Tensor>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    forward_done: bool,
    corrupt_backward: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// A graph whose backward pass deliberately drops the mean term of the
    /// batch-norm rule and uses a wrong tanh derivative. Used to confirm that
    /// gradient checking catches broken rules.
    pub fn with_corrupt_backward() -> Self {
        Graph { corrupt_backward: true, ..Graph::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> NodeInfo<'_> {
        let n = &self.nodes[v.0];
        NodeInfo {
            id: v.0,
            kind: n.op.kind(),
            parents: n.op.parents().into_iter().map(|p| p.0).collect(),
            value: n.value.as_ref(),
            gradient: n.grad.as_ref(),
        }
    }

    fn push(&mut self, op: Op, value: Option<Tensor>, requires_grad: bool) -> Var {
        self.forward_done = false;
        self.nodes.push(Node { op, value, grad: None, requires_grad, bn: None, probs: None });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, op: Op) -> Var {
        let rg = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(op, None, rg)
    }

    /// A constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, Some(value), false)
    }

    /// A trainable leaf. Gradients are reported under `name`; several leaves
    /// sharing a name have their gradients summed.
    pub fn param(&mut self, name: impl Into<String>, value: &Tensor) -> Var {
        self.push(Op::Param(name.into()), Some(value.clone()), true)
    }

    /// A placeholder bound by name when [`forward`](Self::forward) runs.
    pub fn input(&mut self, name: impl Into<String>) -> Var {
        self.push(Op::Input(name.into()), None, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.derived(Op::MatMul(a, b))
    }

    /// `a + b`; `b` may be a per-feature vector.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.derived(Op::Binary(Binary::Add, a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.derived(Op::Binary(Binary::Sub, a, b))
    }

    /// Element-wise product; `b` may be a per-feature vector.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.derived(Op::Binary(Binary::Mul, a, b))
    }

    pub fn unary(&mut self, op: Unary, a: Var) -> Var {
        self.derived(Op::Unary(op, a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.derived(Op::Scale(a, s))
    }

    /// Element-wise product with a constant (masks, dropout).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        self.derived(Op::MulConst(a, c))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        self.derived(Op::Reshape(a, shape.to_vec()))
    }

    pub fn slice_outer(&mut self, a: Var, start: usize, len: usize) -> Var {
        self.derived(Op::SliceOuter(a, start, len))
    }

    pub fn concat_outer(&mut self, parts: &[Var]) -> Var {
        self.derived(Op::ConcatOuter(parts.to_vec()))
    }

    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Var {
        self.derived(Op::SliceLast(a, start, len))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        self.derived(Op::ConcatLast(parts.to_vec()))
    }

    /// Row lookup into a `[V×E]` table.
    pub fn gather(&mut self, table: Var, indices: Vec<usize>) -> Var {
        self.derived(Op::Gather(table, indices))
    }

    /// Fused batch normalization over the rows of `x` (viewed as `[rows×F]`).
    /// `mask` holds one 0/1 weight per row; masked-out rows are excluded from
    /// the statistics and produce zero output.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mask: Option<Vec<f64>>,
        eps: f64,
        stats: BnStatistics,
    ) -> Var {
        self.derived(Op::BatchNorm { x, gamma, beta, mask, eps, stats })
    }

    /// Mean softmax cross-entropy over masked-in rows of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<usize>, mask: Vec<f64>) -> Var {
        self.derived(Op::SoftmaxCrossEntropy { logits, targets, mask })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.derived(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.derived(Op::Mean(a))
    }

    /// Value of a node after [`forward`](Self::forward).
    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.nodes[v.0]
            .value
            .as_ref()
            .ok_or_else(|| Error::State(format!("node {} has no value; run forward first", v.0)))
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Batch statistics computed by a training-mode batch-norm node.
    pub fn bn_statistics(&self, v: Var) -> Option<&BatchStats> {
        self.nodes[v.0].bn.as_ref().map(|s| &s.stats)
    }

    /// Evaluates every node in creation order and returns the value of the
    /// last node.
    pub fn forward(&mut self, inputs: &HashMap<String, Tensor>) -> Result<Tensor> {
        if self.nodes.is_empty() {
            return Err(Error::State("forward on an empty graph".into()));
        }
        for i in 0..self.nodes.len() {
            if let Op::Input(name) = &self.nodes[i].op {
                let t = inputs.get(name).ok_or_else(|| {
                    Error::Configuration(format!("input `{name}` is not bound"))
                })?;
                self.nodes[i].value = Some(t.clone());
                continue;
            }
            if self.nodes[i].value.is_some() && matches!(self.nodes[i].op, Op::Constant | Op::Param(_)) {
                continue;
            }
            self.eval_node(i)?;
        }
        self.forward_done = true;
        Ok(self.nodes.last().unwrap().value.clone().unwrap())
    }

    fn val(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.as_ref().expect("parent evaluated")
    }

    fn eval_node(&mut self, i: usize) -> Result<()> {
        let op = &self.nodes[i].op;
        let mut bn_saved = None;
        let mut probs = None;
        let value = match op {
            Op::Constant | Op::Param(_) | Op::Input(_) => unreachable!(),
            Op::MatMul(a, b) => self.val(*a).matmul(self.val(*b))?,
            Op::Binary(kind, a, b) => self.val(*a).zip(*kind, self.val(*b))?,
            Op::Unary(kind, a) => self.val(*a).map(*kind),
            Op::Scale(a, s) => self.val(*a).scale(*s),
            Op::MulConst(a, c) => self.val(*a).mul(c)?,
            Op::Reshape(a, shape) => self.val(*a).reshape(shape)?,
            Op::SliceOuter(a, s, l) => self.val(*a).slice_outer(*s, *l)?,
            Op::ConcatOuter(parts) => {
                let ts: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
                Tensor::concat_outer(&ts)?
            }
            Op::SliceLast(a, s, l) => self.val(*a).slice_last(*s, *l)?,
            Op::ConcatLast(parts) => {
                let ts: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
                Tensor::concat_last(&ts)?
            }
            Op::Gather(table, idx) => {
                let t = self.val(*table);
                if t.rank() != 2 {
                    return Err(Error::dim(format!("gather table must be 2-D, got {:?}", t.shape())));
                }
                let (v, e) = (t.shape()[0], t.shape()[1]);
                let mut data = Vec::with_capacity(idx.len() * e);
                for &k in idx {
                    if k >= v {
                        return Err(Error::dim(format!("gather index {k} out of range for {v} rows")));
                    }
                    data.extend_from_slice(&t.data()[k * e..(k + 1) * e]);
                }
                Tensor::new(vec![idx.len(), e], data)?
            }
            Op::BatchNorm { x, gamma, beta, mask, eps, stats } => {
                let (y, saved) =
                    bn_forward(self.val(*x), self.val(*gamma), self.val(*beta), mask.as_deref(), *eps, stats)?;
                bn_saved = Some(saved);
                y
            }
            Op::SoftmaxCrossEntropy { logits, targets, mask } => {
                let (loss, p) = softmax_xent_forward(self.val(*logits), targets, mask)?;
                probs = Some(p);
                Tensor::scalar(loss)
            }
            Op::Sum(a) => Tensor::scalar(self.val(*a).sum_all()),
            Op::Mean(a) => {
                let t = self.val(*a);
                Tensor::scalar(t.sum_all() / t.numel() as f64)
            }
        };
        let node = &mut self.nodes[i];
        node.value = Some(value);
        node.bn = bn_saved;
        node.probs = probs;
        Ok(())
    }

    /// Propagates `seed` from the last node back to every leaf and returns the
    /// accumulated gradient of each named parameter.
    pub fn backward(&mut self, seed: Tensor) -> Result<Gradients> {
        if !self.forward_done {
            return Err(Error::State("backward called before forward".into()));
        }
        let root = self.nodes.len() - 1;
        let root_shape = self.nodes[root].value.as_ref().unwrap().shape().to_vec();
        if seed.shape() != root_shape.as_slice() {
            return Err(Error::dim(format!(
                "seed shape {:?} does not match root shape {:?}",
                seed.shape(),
                root_shape
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root].grad = Some(seed);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contributions = self.local_backward(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (parent, pg) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[parent.0].grad {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        let mut grads = Gradients::new();
        for n in &self.nodes {
            if let Op::Param(name) = &n.op {
                let g = match &n.grad {
                    Some(g) => g.clone(),
                    None => Tensor::zeros(n.value.as_ref().unwrap().shape()),
                };
                match grads.get_mut(name) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        grads.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(grads)
    }

    fn local_backward(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Constant | Op::Param(_) | Op::Input(_) => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    out.push((*a, g.matmul_nt(self.val(*b))?));
                }
                if needs(b) {
                    out.push((*b, self.val(*a).matmul_tn(g)?));
                }
            }
            Op::Binary(kind, a, b) => {
                let av = self.val(*a);
                let bv = self.val(*b);
                let broadcast = av.shape() != bv.shape();
                match kind {
                    Binary::Add | Binary::Sub => {
                        if needs(a) {
                            out.push((*a, g.clone()));
                        }
                        if needs(b) {
                            let gb = if broadcast { g.sum_rows() } else { g.clone() };
                            let gb = if *kind == Binary::Sub { gb.scale(-1.0) } else { gb };
                            out.push((*b, gb));
                        }
                    }
                    Binary::Mul => {
                        if needs(a) {
                            out.push((*a, g.mul(bv)?));
                        }
                        if needs(b) {
                            let gb = g.mul(av)?;
                            out.push((*b, if broadcast { gb.sum_rows() } else { gb }));
                        }
                    }
                }
            }
            Op::Unary(kind, a) => {
                let x = self.val(*a);
                let y = node.value.as_ref().unwrap();
                let d: Vec<f64> = match kind {
                    Unary::Sigmoid => y.data().iter().map(|&s| s * (1.0 - s)).collect(),
                    Unary::Tanh if self.corrupt_backward => y.data().iter().map(|&t| 1.0 - t).collect(),
                    Unary::Tanh => y.data().iter().map(|&t| 1.0 - t * t).collect(),
                    Unary::Sqrt => y.data().iter().map(|&r| 0.5 / r).collect(),
                    Unary::Reciprocal => x.data().iter().map(|&v| -1.0 / (v * v)).collect(),
                    Unary::Exp => y.data().to_vec(),
                    Unary::Neg => vec![-1.0; x.numel()],
                };
                out.push((*a, g.mul(&Tensor::new(x.shape().to_vec(), d)?)?));
            }
            Op::Scale(a, s) => out.push((*a, g.scale(*s))),
            Op::MulConst(a, c) => out.push((*a, g.mul(c)?)),
            Op::Reshape(a, _) => out.push((*a, g.reshape(self.val(*a).shape())?)),
            Op::SliceOuter(a, start, _) => {
                let src = self.val(*a);
                let inner: usize = src.shape()[1..].iter().product();
                let mut full = Tensor::zeros(src.shape());
                full.data_mut()[start * inner..start * inner + g.numel()].copy_from_slice(g.data());
                out.push((*a, full));
            }
            Op::ConcatOuter(parts) => {
                let mut start = 0;
                for p in parts {
                    let len = self.val(*p).shape()[0];
                    if needs(p) {
                        out.push((*p, g.slice_outer(start, len)?));
                    }
                    start += len;
                }
            }
            Op::SliceLast(a, start, len) => {
                let src = self.val(*a);
                let f = src.last_dim();
                let mut full = Tensor::zeros(src.shape());
                for (row, grow) in full.data_mut().chunks_exact_mut(f).zip(g.data().chunks_exact(*len)) {
                    row[*start..start + len].copy_from_slice(grow);
                }
                out.push((*a, full));
            }
            Op::ConcatLast(parts) => {
                let mut start = 0;
                for p in parts {
                    let len = self.val(*p).last_dim();
                    if needs(p) {
                        out.push((*p, g.slice_last(start, len)?));
                    }
                    start += len;
                }
            }
            Op::Gather(table, idx) => {
                let t = self.val(*table);
                let e = t.shape()[1];
                let mut full = Tensor::zeros(t.shape());
                let data = full.data_mut();
                for (r, &k) in idx.iter().enumerate() {
                    for j in 0..e {
                        data[k * e + j] += g.data()[r * e + j];
                    }
                }
                out.push((*table, full));
            }
            Op::BatchNorm { x, gamma, beta, mask, stats, .. } => {
                let saved = node.bn.as_ref().expect("batch-norm forward saved state");
                let train = matches!(stats, BnStatistics::Batch);
                let (dx, dgamma, dbeta) = bn_backward(
                    g,
                    self.val(*gamma),
                    saved,
                    mask.as_deref(),
                    train,
                    self.corrupt_backward,
                )?;
                if needs(x) {
                    out.push((*x, dx));
                }
                if needs(gamma) {
                    out.push((*gamma, dgamma));
                }
                if needs(beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, mask } => {
                let p = node.probs.as_ref().unwrap();
                let c = p.last_dim();
                let n: f64 = mask.iter().sum();
                let seed = g.data()[0];
                let mut d = p.data().to_vec();
                for (r, row) in d.chunks_exact_mut(c).enumerate() {
                    let w = mask[r] * seed / n;
                    row[targets[r]] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= w);
                }
                out.push((*logits, Tensor::new(p.shape().to_vec(), d)?));
            }
            Op::Sum(a) => {
                let shape = self.val(*a).shape();
                out.push((*a, Tensor::full(shape, g.data()[0])));
            }
            Op::Mean(a) => {
                let t = self.val(*a);
                out.push((*a, Tensor::full(t.shape(), g.data()[0] / t.numel() as f64)));
            }
        }
        Ok(out)
    }
}

fn bn_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mask: Option<&[f64]>,
    eps: f64,
    stats: &BnStatistics,
) -> Result<(Tensor, BnSaved)> {
    let f = x.last_dim();
    if gamma.shape() != [f] || beta.shape() != [f] {
        return Err(Error::dim(format!(
            "batch norm over {:?} needs gamma/beta of shape [{f}], got {:?}/{:?}",
            x.shape(),
            gamma.shape(),
            beta.shape()
        )));
    }
    if let Some(m) = mask {
        if m.len() != x.rows() {
            return Err(Error::dim(format!("mask has {} rows, input has {}", m.len(), x.rows())));
        }
    }
    let batch_stats = match stats {
        BnStatistics::Batch => masked_statistics(x, mask)?,
        BnStatistics::Fixed { mean, var } => {
            if mean.len() != f || var.len() != f {
                return Err(Error::dim("stored statistics width does not match input"));
            }
            BatchStats { mean: mean.clone(), var: var.clone(), count: 0 }
        }
    };
    let inv_std: Vec<f64> = batch_stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.numel()];
    let mut y = vec![0.0; x.numel()];
    for (r, (row, (xh, yr))) in x
        .data()
        .chunks_exact(f)
        .zip(xhat.chunks_exact_mut(f).zip(y.chunks_exact_mut(f)))
        .enumerate()
    {
        if mask.is_some_and(|m| m[r] == 0.0) {
            continue;
        }
        for k in 0..f {
            let h = (row[k] - batch_stats.mean[k]) * inv_std[k];
            xh[k] = h;
            yr[k] = gamma.data()[k] * h + beta.data()[k];
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        BnSaved { xhat: Tensor::new(shape, xhat)?, inv_std, stats: batch_stats },
    ))
}

fn bn_backward(
    g: &Tensor,
    gamma: &Tensor,
    saved: &BnSaved,
    mask: Option<&[f64]>,
    train: bool,
    corrupt: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    let f = g.last_dim();
    let gd = g.data();
    let xh = saved.xhat.data();
    let live = |r: usize| mask.map_or(true, |m| m[r] != 0.0);

    let mut dgamma = vec![0.0; f];
    let mut dbeta = vec![0.0; f];
    // sums of dxhat and dxhat * xhat over live rows
    let mut s1 = vec![0.0; f];
    let mut s2 = vec![0.0; f];
    for r in 0..g.rows() {
        if !live(r) {
            continue;
        }
        for k in 0..f {
            let gi = gd[r * f + k];
            let h = xh[r * f + k];
            dgamma[k] += gi * h;
            dbeta[k] += gi;
            let dxh = gi * gamma.data()[k];
            s1[k] += dxh;
            s2[k] += dxh * h;
        }
    }
    let n = saved.stats.count as f64;
    let mut dx = vec![0.0; g.numel()];
    for r in 0..g.rows() {
        if !live(r) {
            continue;
        }
        for k in 0..f {
            let dxh = gd[r * f + k] * gamma.data()[k];
            dx[r * f + k] = if train {
                let mean_term = if corrupt { 0.0 } else { s1[k] };
                saved.inv_std[k] / n * (n * dxh - mean_term - xh[r * f + k] * s2[k])
            } else {
                dxh * saved.inv_std[k]
            };
        }
    }
    Ok((
        Tensor::new(g.shape().to_vec(), dx)?,
        Tensor::vector(dgamma),
        Tensor::vector(dbeta),
    ))
}

/// Returns the mean negative log-likelihood over masked-in rows and the
/// softmax probabilities.
fn softmax_xent_forward(logits: &Tensor, targets: &[usize], mask: &[f64]) -> Result<(f64, Tensor)> {
    let c = logits.last_dim();
    let rows = logits.rows();
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::dim(format!(
            "cross-entropy over {rows} rows got {} targets and {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let n: f64 = mask.iter().sum();
    if n == 0.0 {
        return Err(Error::Degenerate("cross-entropy over zero masked-in frames".into()));
    }
    let mut probs = vec![0.0; logits.numel()];
    let mut total = 0.0;
    for (r, (row, prow)) in logits.data().chunks_exact(c).zip(probs.chunks_exact_mut(c)).enumerate() {
        let lse = log_sum_exp(row);
        for (p, &z) in prow.iter_mut().zip(row) {
            *p = (z - lse).exp();
        }
        if mask[r] != 0.0 {
            let t = targets[r];
            if t >= c {
                return Err(Error::dim(format!("target {t} out of range for {c} classes")));
            }
            total += lse - row[t];
        }
    }
    Ok((total / n, Tensor::new(logits.shape().to_vec(), probs)?))
}

/// `log Σ exp(z)` computed stably.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|&z| (z - max).exp()).sum();
    max + s.ln()
}

/// Result of comparing analytic and central-difference gradients for one
/// parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub elements_checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, |a, b| if b.is_nan() { b } else { a.max(b) })
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Ridders' polynomial extrapolation of central differences `central(h)`
/// over a shrinking step sequence starting at `step`. Stops once the tableau
/// stops improving and returns the estimate with the smallest error bound.
fn ridders(mut central: impl FnMut(f64) -> Result<f64>, step: f64) -> Result<(f64, f64)> {
    const SHRINK: f64 = 1.4;
    const SHRINK2: f64 = SHRINK * SHRINK;
    const ROWS: usize = 10;
    let mut tab = [[0.0f64; ROWS]; ROWS];
    let mut h = step;
    tab[0][0] = central(h)?;
    let mut best = tab[0][0];
    let mut err = f64::INFINITY;
    for i in 1..ROWS {
        h /= SHRINK;
        tab[0][i] = central(h)?;
        let mut fac = SHRINK2;
        for j in 1..=i {
            tab[j][i] = (tab[j - 1][i] * fac - tab[j - 1][i - 1]) / (fac - 1.0);
            fac *= SHRINK2;
            let e = (tab[j][i] - tab[j - 1][i]).abs().max((tab[j][i] - tab[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = tab[j][i];
            }
        }
        if (tab[i][i] - tab[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    Ok((best, err))
}

/// Compares the gradients returned by `loss_and_grads` with central finite
/// differences of its loss, extrapolated to zero step from `step` downward.
/// Parameters with more than `max_elements` entries are checked on a seeded
/// random sample of that many entries (at least 100).
///
/// The model is restored to its original values before returning.
pub fn check_gradients<M, F>(
    model: &mut M,
    mut loss_and_grads: F,
    step: f64,
    tolerance: f64,
    max_elements: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: FnMut(&M) -> Result<(f64, Gradients)>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::Configuration(format!("finite-difference step {step} outside (0, 1e-2]")));
    }
    let max_elements = max_elements.max(100);
    let (_, analytic) = loss_and_grads(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<(String, usize)> =
        model.parameters().iter().map(|p| (p.name.clone(), p.value.numel())).collect();

    let mut report = Vec::new();
    for (pi, (name, numel)) in names.iter().enumerate() {
        let indices: Vec<usize> = if *numel > max_elements {
            let mut v = sample(&mut rng, *numel, max_elements).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..*numel).collect()
        };
        let a_grad = analytic.get(name);
        let mut worst: f64 = 0.0;
        for &j in &indices {
            let original = model.parameters()[pi].value.data()[j];
            let numeric = ridders(
                |h| {
                    model.parameters_mut()[pi].value.data_mut()[j] = original + h;
                    let plus = loss_and_grads(model).map(|r| r.0);
                    model.parameters_mut()[pi].value.data_mut()[j] = original - h;
                    let minus = loss_and_grads(model).map(|r| r.0);
                    model.parameters_mut()[pi].value.data_mut()[j] = original;
                    Ok((plus? - minus?) / (2.0 * h))
                },
                step,
            )?
            .0;
            let a = a_grad.map_or(0.0, |g| g.data()[j]);
            let err = relative_error(a, numeric);
            if err.is_nan() || err > worst {
                worst = err;
                if err.is_nan() {
                    break;
                }
            }
        }
        report.push(ParamCheck {
            name: name.clone(),
            elements_checked: indices.len(),
            max_rel_error: worst,
            passed: worst.is_finite() && worst <= tolerance,
        });
    }
    Ok(GradCheckReport { tolerance, params: report })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor)]) -> HashMap<String, Tensor> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn identity_graph() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.scale(x, 1.0);
        let out = g.forward(&bind(&[("x", Tensor::vector(vec![1.0, 2.0]))])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
        assert_eq!(g.value(y).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn sigmoid_of_zero_weights() {
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.param("W", &Tensor::zeros(&[3, 2]));
        let wx = g.matmul(x, w);
        g.sigmoid(wx);
        let out = g.forward(&bind(&[("x", Tensor::ones(&[4, 3]))])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn sum_of_squares() {
        let mut g = Graph::new();
        let x = g.input("x");
        let sq = g.mul(x, x);
        g.sum(sq);
        let out = g.forward(&bind(&[("x", Tensor::vector(vec![1.0, 2.0, 3.0]))])).unwrap();
        assert_eq!(out.data(), &[14.0]);
        g.backward(Tensor::scalar(1.0)).unwrap();
        // fan-out: d/dx (x*x) = 2x
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unbound_input_is_a_configuration_error() {
        let mut g = Graph::new();
        let x = g.input("x");
        g.sum(x);
        assert!(matches!(g.forward(&HashMap::new()), Err(Error::Configuration(_))));
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1.0));
        g.sum(x);
        assert!(matches!(g.backward(Tensor::scalar(1.0)), Err(Error::State(_))));
    }

    #[test]
    fn seed_shape_must_match_root() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::vector(vec![1.0, 2.0]));
        g.scale(x, 2.0);
        g.forward(&HashMap::new()).unwrap();
        assert!(matches!(g.backward(Tensor::scalar(1.0)), Err(Error::Dimension(_))));
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::vector(vec![0.3, -1.0, 7.0]));
        g.sum(x);
        g.forward(&HashMap::new()).unwrap();
        let grads = g.backward(Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads["x"].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn shared_parameter_leaves_accumulate() {
        let w = Tensor::vector(vec![2.0]);
        let mut g = Graph::new();
        let a = g.param("w", &w);
        let b = g.param("w", &w);
        let p = g.mul(a, b);
        g.sum(p);
        g.forward(&HashMap::new()).unwrap();
        let grads = g.backward(Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads["w"].data(), &[4.0]);
    }

    #[test]
    fn nodes_record_parents_in_creation_order() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.0));
        let b = g.param("b", &Tensor::scalar(2.0));
        let c = g.add(a, b);
        let info = g.node(c);
        assert_eq!(info.kind, "add");
        assert!(info.parents.iter().all(|&p| p < info.id));
        assert!(info.value.is_none());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
    }
}
