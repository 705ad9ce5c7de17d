use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use rand::Rng;

use super::ops::{self, axis_split};
use super::{Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// How a loss reduces over its labeled items.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over non-ignored targets; zero when every target is ignored.
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    SumAxis(usize, usize),
    Index(usize, usize),
    Softmax(usize, usize),
    Cumsum { input: usize, axis: usize, reverse: bool },
    LayerNorm { input: usize, gain: Option<usize>, bias: Option<usize>, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv1d { input: usize, weight: usize, bias: Option<usize>, kernel: usize },
    Sigmoid(usize),
    LogSigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Gelu(usize),
    Embedding { table: usize, ids: Vec<usize> },
    Dropout { input: usize, mask: Vec<f64> },
    CrossEntropy { logits: usize, targets: Vec<Option<usize>>, probs: Vec<f64>, scale: f64 },
    SliceRows { input: usize, start: usize },
    SliceCols { input: usize, start: usize },
    ConcatCols(Vec<usize>),
    PadCols { input: usize, left: usize },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf | Constant => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(a, _) | Transpose(a) | Reshape(a) | Sum(a) | SumAxis(a, _) | Index(a, _)
            | Softmax(a, _) | Sigmoid(a) | LogSigmoid(a) | Tanh(a) | Exp(a) | Log(a) | Gelu(a) => {
                vec![*a]
            }
            Cumsum { input, .. }
            | Dropout { input, .. }
            | SliceRows { input, .. }
            | SliceCols { input, .. }
            | PadCols { input, .. } => vec![*input],
            LayerNorm { input, gain, bias, .. } => {
                let mut v = vec![*input];
                v.extend(gain.iter().chain(bias.iter()));
                v
            }
            Conv1d { input, weight, bias, .. } => {
                let mut v = vec![*input, *weight];
                v.extend(bias.iter());
                v
            }
            Embedding { table, .. } => vec![*table],
            CrossEntropy { logits, .. } => vec![*logits],
            ConcatCols(parts) => parts.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations. Nodes are only ever appended, so every
/// node's inputs have smaller indices than the node itself.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<HashMap<usize, Vec<f64>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Accumulated gradient of a trainable leaf, available after [`Tape::backward`].
    pub fn grad(&self, var: &Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(&var.id)?;
        let shape = self.nodes.borrow()[var.id].value.shape.clone();
        Some(Tensor { shape, data: g.clone() })
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Propagates adjoints from a scalar `loss` to every trainable leaf.
    ///
    /// Leaf gradients accumulate across calls. Leaves that do not reach the
    /// loss end up with an all-zero gradient.
    pub fn backward(&self, loss: &Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape.clone()));
        }
        let mut adjoint: Vec<Option<Vec<f64>>> = Vec::new();
        adjoint.resize_with(loss.id + 1, || None);
        adjoint[loss.id] = Some(vec![1.0]);
        let mut leaf_grads = self.grads.borrow_mut();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adjoint[id].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                match leaf_grads.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        leaf_grads.insert(id, g);
                    }
                }
                continue;
            }
            for (input, contribution) in local_adjoints(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut adjoint[input] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(contribution),
                }
            }
        }
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                leaf_grads.entry(id).or_insert_with(|| vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn derived(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(value, op, requires_grad)
    }
}

fn local_adjoints(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let val = |i: usize| &nodes[i].value;
    let out = &node.value;
    match &node.op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add(a, b) => vec![
            (*a, ops::unbroadcast(g, &val(*a).shape, &out.shape)),
            (*b, ops::unbroadcast(g, &val(*b).shape, &out.shape)),
        ],
        Op::Sub(a, b) => {
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            vec![
                (*a, ops::unbroadcast(g, &val(*a).shape, &out.shape)),
                (*b, ops::unbroadcast(&neg, &val(*b).shape, &out.shape)),
            ]
        }
        Op::Mul(a, b) => {
            let av = ops::expand(&val(*a).shape, &val(*a).data, &out.shape);
            let bv = ops::expand(&val(*b).shape, &val(*b).data, &out.shape);
            let ga: Vec<f64> = g.iter().zip(&bv).map(|(g, b)| g * b).collect();
            let gb: Vec<f64> = g.iter().zip(&av).map(|(g, a)| g * a).collect();
            vec![
                (*a, ops::unbroadcast(&ga, &val(*a).shape, &out.shape)),
                (*b, ops::unbroadcast(&gb, &val(*b).shape, &out.shape)),
            ]
        }
        Op::Div(a, b) => {
            let bv = ops::expand(&val(*b).shape, &val(*b).data, &out.shape);
            let ga: Vec<f64> = g.iter().zip(&bv).map(|(g, b)| g / b).collect();
            let gb: Vec<f64> = g
                .iter()
                .zip(&bv)
                .zip(&out.data)
                .map(|((g, b), y)| -g * y / b)
                .collect();
            vec![
                (*a, ops::unbroadcast(&ga, &val(*a).shape, &out.shape)),
                (*b, ops::unbroadcast(&gb, &val(*b).shape, &out.shape)),
            ]
        }
        Op::Scale(a, c) => vec![(*a, g.iter().map(|v| v * c).collect())],
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape[0], val(*a).shape[1]);
            let n = val(*b).shape[1];
            let bt = ops::transpose(&val(*b).data, k, n);
            let at = ops::transpose(&val(*a).data, m, k);
            vec![(*a, ops::matmul(g, &bt, m, n, k)), (*b, ops::matmul(&at, g, k, m, n))]
        }
        Op::Transpose(a) => {
            let (r, c) = (val(*a).shape[0], val(*a).shape[1]);
            vec![(*a, ops::transpose(g, c, r))]
        }
        Op::Reshape(a) => vec![(*a, g.to_vec())],
        Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).numel()])],
        Op::SumAxis(a, axis) => {
            let (outer, n, inner) = axis_split(&val(*a).shape, *axis);
            let mut dx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        dx[o * n * inner + k * inner + i] = g[o * inner + i];
                    }
                }
            }
            vec![(*a, dx)]
        }
        Op::Index(a, flat) => {
            let mut dx = vec![0.0; val(*a).numel()];
            dx[*flat] = g[0];
            vec![(*a, dx)]
        }
        Op::Softmax(a, axis) => {
            vec![(*a, ops::softmax_adjoint(&out.data, g, axis_split(&out.shape, *axis)))]
        }
        Op::Cumsum { input, axis, reverse } => {
            vec![(*input, ops::cumsum(g, axis_split(&out.shape, *axis), !reverse))]
        }
        Op::LayerNorm { input, gain, bias, xhat, inv_std } => {
            let width = *out.shape.last().unwrap();
            let rows = out.numel() / width.max(1);
            let gain_v = gain.map(|i| &val(i).data);
            let mut dx = vec![0.0; out.numel()];
            let mut dgain = vec![0.0; width];
            let mut dbias = vec![0.0; width];
            for r in 0..rows {
                let range = r * width..(r + 1) * width;
                let (gr, xr) = (&g[range.clone()], &xhat[range.clone()]);
                let dxhat: Vec<f64> = match gain_v {
                    Some(gv) => gr.iter().zip(gv).map(|(g, w)| g * w).collect(),
                    None => gr.to_vec(),
                };
                let sum_d: f64 = dxhat.iter().sum();
                let sum_dx: f64 = dxhat.iter().zip(xr).map(|(d, x)| d * x).sum();
                let n = width as f64;
                for j in 0..width {
                    dx[r * width + j] = inv_std[r] / n * (n * dxhat[j] - sum_d - xr[j] * sum_dx);
                    dgain[j] += gr[j] * xr[j];
                    dbias[j] += gr[j];
                }
            }
            let mut v = vec![(*input, dx)];
            if let Some(i) = gain {
                v.push((*i, dgain));
            }
            if let Some(i) = bias {
                v.push((*i, dbias));
            }
            v
        }
        Op::Conv1d { input, weight, bias, kernel } => {
            let x = val(*input);
            let (len, c_in) = (x.shape[0], x.shape[1]);
            let c_out = out.shape[1];
            let (dx, dw) = ops::conv1d_adjoint(&x.data, &val(*weight).data, g, len, c_in, c_out, *kernel);
            let mut v = vec![(*input, dx), (*weight, dw)];
            if let Some(b) = bias {
                v.push((*b, ops::sum_axis(g, (1, len, c_out))));
            }
            v
        }
        Op::Sigmoid(a) => vec![(*a, g.iter().zip(&out.data).map(|(g, y)| g * y * (1.0 - y)).collect())],
        Op::LogSigmoid(a) => vec![(
            *a,
            g.iter().zip(&val(*a).data).map(|(g, &x)| g * ops::sigmoid(-x)).collect(),
        )],
        Op::Tanh(a) => vec![(*a, g.iter().zip(&out.data).map(|(g, y)| g * (1.0 - y * y)).collect())],
        Op::Exp(a) => vec![(*a, g.iter().zip(&out.data).map(|(g, y)| g * y).collect())],
        Op::Log(a) => vec![(*a, g.iter().zip(&val(*a).data).map(|(g, x)| g / x).collect())],
        Op::Gelu(a) => vec![(
            *a,
            g.iter().zip(&val(*a).data).map(|(g, &x)| g * ops::gelu_grad(x)).collect(),
        )],
        Op::Embedding { table, ids } => {
            let t = val(*table);
            let width = t.shape[1];
            let mut dt = vec![0.0; t.numel()];
            for (row, &id) in ids.iter().enumerate() {
                for j in 0..width {
                    dt[id * width + j] += g[row * width + j];
                }
            }
            vec![(*table, dt)]
        }
        Op::Dropout { input, mask } => vec![(*input, g.iter().zip(mask).map(|(g, m)| g * m).collect())],
        Op::CrossEntropy { logits, targets, probs, scale } => {
            let vocab = val(*logits).shape[1];
            let mut dl = vec![0.0; probs.len()];
            for (row, target) in targets.iter().enumerate() {
                let Some(t) = target else { continue };
                for j in 0..vocab {
                    let indicator = if j == *t { 1.0 } else { 0.0 };
                    dl[row * vocab + j] = g[0] * scale * (probs[row * vocab + j] - indicator);
                }
            }
            vec![(*logits, dl)]
        }
        Op::SliceRows { input, start } => {
            let x = val(*input);
            let width = x.shape[1];
            let mut dx = vec![0.0; x.numel()];
            dx[start * width..start * width + g.len()].copy_from_slice(g);
            vec![(*input, dx)]
        }
        Op::SliceCols { input, start } => {
            let x = val(*input);
            let (rows, cols) = (x.shape[0], x.shape[1]);
            let w = out.shape[1];
            let mut dx = vec![0.0; x.numel()];
            for r in 0..rows {
                dx[r * cols + start..r * cols + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            vec![(*input, dx)]
        }
        Op::ConcatCols(parts) => {
            let rows = out.shape[0];
            let total = out.shape[1];
            let mut offset = 0;
            let mut v = Vec::with_capacity(parts.len());
            for &p in parts {
                let w = val(p).shape[1];
                let mut dp = vec![0.0; rows * w];
                for r in 0..rows {
                    dp[r * w..(r + 1) * w].copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                }
                offset += w;
                v.push((p, dp));
            }
            v
        }
        Op::PadCols { input, left } => {
            let x = val(*input);
            let (rows, cols) = (x.shape[0], x.shape[1]);
            let total = out.shape[1];
            let mut dx = vec![0.0; x.numel()];
            for r in 0..rows {
                dx[r * cols..(r + 1) * cols].copy_from_slice(&g[r * total + left..r * total + left + cols]);
            }
            vec![(*input, dx)]
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn node(&self) -> Ref<'t, Node> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    pub fn value(&self) -> Tensor {
        self.node().value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().value.shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.node().requires_grad
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.node().value.data[0]
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = {
            let node = self.node();
            Tensor { shape: node.value.shape.clone(), data: node.value.data.iter().map(|&v| f(v)).collect() }
        };
        self.tape.derived(value, op)
    }

    fn binary(&self, other: &Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let (shape, data) = {
            let a = self.node();
            let b = other.node();
            ops::binary(name, (&a.value.shape, &a.value.data), (&b.value.shape, &b.value.data), f)?
        };
        Ok(self.tape.derived(Tensor { shape, data }, op))
    }

    /// Elementwise sum with broadcasting over trailing dimensions.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), ops::sigmoid)
    }

    /// `ln(sigmoid(x))`, finite for arbitrarily large `|x|`.
    pub fn log_sigmoid(&self) -> Var<'t> {
        self.unary(Op::LogSigmoid(self.id), ops::log_sigmoid)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), ops::gelu)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = &self.node().value;
            let b = &other.node().value;
            if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            Tensor { shape: vec![m, n], data: ops::matmul(&a.data, &b.data, m, k, n) }
        };
        Ok(self.tape.derived(value, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let value = {
            let a = &self.node().value;
            a.require_rank("transpose", 2)?;
            let (r, c) = (a.shape[0], a.shape[1]);
            Tensor { shape: vec![c, r], data: ops::transpose(&a.data, r, c) }
        };
        Ok(self.tape.derived(value, Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>> {
        let value = {
            let a = &self.node().value;
            if shape.iter().product::<usize>() != a.numel() {
                return Err(TensorError::ShapeMismatch { op: "reshape", left: a.shape.clone(), right: shape });
            }
            Tensor { shape, data: a.data.clone() }
        };
        Ok(self.tape.derived(value, Op::Reshape(self.id)))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.node().value.data.iter().sum();
        self.tape.derived(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.node().value.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let a = &self.node().value;
            check_axis(a, axis)?;
            let mut shape = a.shape.clone();
            let data = ops::sum_axis(&a.data, axis_split(&a.shape, axis));
            shape[axis] = 1;
            Tensor { shape, data }
        };
        Ok(self.tape.derived(value, Op::SumAxis(self.id, axis)))
    }

    /// Selects one element by flat index as a scalar.
    pub fn index(&self, flat: usize) -> Result<Var<'t>> {
        let v = {
            let a = &self.node().value;
            *a.data.get(flat).ok_or(TensorError::Index { op: "index", index: flat, bound: a.numel() })?
        };
        Ok(self.tape.derived(Tensor::scalar(v), Op::Index(self.id, flat)))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let a = &self.node().value;
            check_axis(a, axis)?;
            if a.shape[axis] == 0 {
                return Err(TensorError::EmptyAxis("softmax"));
            }
            Tensor { shape: a.shape.clone(), data: ops::softmax(&a.data, axis_split(&a.shape, axis)) }
        };
        Ok(self.tape.derived(value, Op::Softmax(self.id, axis)))
    }

    /// Running sum along `axis`; `reverse` accumulates from the far end.
    pub fn cumsum(&self, axis: usize, reverse: bool) -> Result<Var<'t>> {
        let value = {
            let a = &self.node().value;
            check_axis(a, axis)?;
            Tensor { shape: a.shape.clone(), data: ops::cumsum(&a.data, axis_split(&a.shape, axis), reverse) }
        };
        Ok(self.tape.derived(value, Op::Cumsum { input: self.id, axis, reverse }))
    }

    /// Normalizes over the last axis, then applies the optional gain and bias.
    pub fn layer_norm(&self, gain: Option<&Var<'t>>, bias: Option<&Var<'t>>, eps: f64) -> Result<Var<'t>> {
        let (value, cache) = {
            let a = &self.node().value;
            let width = *a.shape.last().ok_or(TensorError::Rank { op: "layer_norm", expected: 1, shape: vec![] })?;
            for p in gain.iter().chain(bias.iter()) {
                let ps = p.shape();
                if ps != [width] {
                    return Err(TensorError::ShapeMismatch { op: "layer_norm", left: a.shape.clone(), right: ps });
                }
            }
            let cache = ops::layer_norm(&a.data, width, eps);
            let mut data = cache.xhat.clone();
            if let Some(g) = gain {
                let gv = g.value();
                data.chunks_mut(width).for_each(|row| row.iter_mut().zip(gv.data()).for_each(|(x, w)| *x *= w));
            }
            if let Some(b) = bias {
                let bv = b.value();
                data.chunks_mut(width).for_each(|row| row.iter_mut().zip(bv.data()).for_each(|(x, w)| *x += w));
            }
            (Tensor { shape: a.shape.clone(), data }, cache)
        };
        Ok(self.tape.derived(
            value,
            Op::LayerNorm {
                input: self.id,
                gain: gain.map(|g| g.id),
                bias: bias.map(|b| b.id),
                xhat: cache.xhat,
                inv_std: cache.inv_std,
            },
        ))
    }

    /// Same-length convolution of a `len × c_in` sequence with a
    /// `kernel × c_in × c_out` weight, zero-padded at both ends.
    pub fn conv1d(&self, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        let value = {
            let x = &self.node().value;
            let w = &weight.node().value;
            x.require_rank("conv1d", 2)?;
            w.require_rank("conv1d", 3)?;
            let kernel = w.shape[0];
            if kernel % 2 == 0 {
                return Err(TensorError::EvenKernel(kernel));
            }
            if w.shape[1] != x.shape[1] {
                return Err(TensorError::ShapeMismatch { op: "conv1d", left: x.shape.clone(), right: w.shape.clone() });
            }
            let (len, c_in, c_out) = (x.shape[0], x.shape[1], w.shape[2]);
            let mut data = ops::conv1d(&x.data, &w.data, len, c_in, c_out, kernel);
            if let Some(b) = bias {
                let bv = &b.node().value;
                if bv.shape != [c_out] {
                    return Err(TensorError::ShapeMismatch { op: "conv1d", left: vec![c_out], right: bv.shape.clone() });
                }
                data.chunks_mut(c_out).for_each(|row| row.iter_mut().zip(&bv.data).for_each(|(o, b)| *o += b));
            }
            Tensor { shape: vec![len, c_out], data }
        };
        let kernel = weight.shape()[0];
        Ok(self.tape.derived(value, Op::Conv1d { input: self.id, weight: weight.id, bias: bias.map(|b| b.id), kernel }))
    }

    /// Gathers rows of an embedding table; the adjoint scatter-adds.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'t>> {
        let value = {
            let t = &self.node().value;
            t.require_rank("embedding", 2)?;
            let (rows, width) = (t.shape[0], t.shape[1]);
            let mut data = Vec::with_capacity(ids.len() * width);
            for &id in ids {
                if id >= rows {
                    return Err(TensorError::Index { op: "embedding", index: id, bound: rows });
                }
                data.extend_from_slice(&t.data[id * width..(id + 1) * width]);
            }
            Tensor { shape: vec![ids.len(), width], data }
        };
        Ok(self.tape.derived(value, Op::Embedding { table: self.id, ids: ids.to_vec() }))
    }

    /// Inverted dropout. `None` (evaluation) or `p == 0` returns the input unchanged.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, rng: Option<&mut R>) -> Var<'t> {
        let Some(rng) = rng else { return *self };
        if p <= 0.0 {
            return *self;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.node().value.numel();
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let value = {
            let a = &self.node().value;
            Tensor { shape: a.shape.clone(), data: a.data.iter().zip(&mask).map(|(x, m)| x * m).collect() }
        };
        self.tape.derived(value, Op::Dropout { input: self.id, mask })
    }

    /// Cross-entropy of `n × vocab` logits against integer targets; targets
    /// equal to `ignore_index` do not contribute.
    pub fn cross_entropy(&self, targets: &[i64], ignore_index: i64, reduction: Reduction) -> Result<Var<'t>> {
        let (loss, probs, parsed, scale) = {
            let l = &self.node().value;
            l.require_rank("cross_entropy", 2)?;
            let (n, vocab) = (l.shape[0], l.shape[1]);
            if targets.len() != n {
                return Err(TensorError::ShapeMismatch { op: "cross_entropy", left: l.shape.clone(), right: vec![targets.len()] });
            }
            let probs = ops::softmax(&l.data, (n, vocab, 1));
            let mut parsed = Vec::with_capacity(n);
            let mut total = 0.0;
            let mut count = 0usize;
            for (row, &t) in targets.iter().enumerate() {
                if t == ignore_index {
                    parsed.push(None);
                    continue;
                }
                let t = usize::try_from(t)
                    .ok()
                    .filter(|&t| t < vocab)
                    .ok_or(TensorError::Index { op: "cross_entropy", index: t as usize, bound: vocab })?;
                let logits = &l.data[row * vocab..(row + 1) * vocab];
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - logits[t];
                count += 1;
                parsed.push(Some(t));
            }
            let scale = match reduction {
                Reduction::Sum => 1.0,
                Reduction::Mean if count == 0 => 0.0,
                Reduction::Mean => 1.0 / count as f64,
            };
            (total * scale, probs, parsed, scale)
        };
        Ok(self.tape.derived(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: self.id, targets: parsed, probs, scale },
        ))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let value = {
            let a = &self.node().value;
            a.require_rank("slice_rows", 2)?;
            if start > end || end > a.shape[0] {
                return Err(TensorError::Index { op: "slice_rows", index: end, bound: a.shape[0] });
            }
            let w = a.shape[1];
            Tensor { shape: vec![end - start, w], data: a.data[start * w..end * w].to_vec() }
        };
        Ok(self.tape.derived(value, Op::SliceRows { input: self.id, start }))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let value = {
            let a = &self.node().value;
            a.require_rank("slice_cols", 2)?;
            if start > end || end > a.shape[1] {
                return Err(TensorError::Index { op: "slice_cols", index: end, bound: a.shape[1] });
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut data = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                data.extend_from_slice(&a.data[r * cols + start..r * cols + end]);
            }
            Tensor { shape: vec![rows, end - start], data }
        };
        Ok(self.tape.derived(value, Op::SliceCols { input: self.id, start }))
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::EmptyAxis("concat_cols"))?;
        let tape = first.tape;
        let value = {
            let rows = first.shape()[0];
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let s = p.shape();
                if s.len() != 2 || s[0] != rows {
                    return Err(TensorError::ShapeMismatch { op: "concat_cols", left: first.shape(), right: s });
                }
                widths.push(s[1]);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            let nodes = tape.nodes.borrow();
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&nodes[p.id].value.data[r * w..(r + 1) * w]);
                }
            }
            Tensor { shape: vec![rows, total], data }
        };
        Ok(tape.derived(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    /// Adds `left` and `right` zero columns around a matrix.
    pub fn pad_cols(&self, left: usize, right: usize) -> Result<Var<'t>> {
        let value = {
            let a = &self.node().value;
            a.require_rank("pad_cols", 2)?;
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let total = left + cols + right;
            let mut data = vec![0.0; rows * total];
            for r in 0..rows {
                data[r * total + left..r * total + left + cols].copy_from_slice(&a.data[r * cols..(r + 1) * cols]);
            }
            Tensor { shape: vec![rows, total], data }
        };
        Ok(self.tape.derived(value, Op::PadCols { input: self.id, left }))
    }
}

fn check_axis(t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(TensorError::Axis { axis, shape: t.shape.clone() });
    }
    Ok(())
}
