//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built define-by-run: every operator call evaluates its
//! value immediately and appends a node whose parents already exist, so node
//! order is a topological order. [`Graph::forward`] replays the recorded
//! operators with new leaf values; [`Graph::backward`] accumulates gradients
//! in reverse node order.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::error::{HvedError, Result};
use crate::kernels;
use crate::tensor::{split_nc, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Operator tag of a node. Scalar attributes are kept in `f64` and cast at
/// evaluation time.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Fed leaf that receives a gradient.
    Input,
    /// Named trainable leaf.
    Param(String),
    /// Fed leaf excluded from differentiation.
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Scale(f64),
    AddScalar(f64),
    LeakyRelu(f64),
    Sigmoid,
    Clamp(f64, f64),
    /// Softmax over axis 1 of `(N, C, ...)`.
    Softmax,
    /// Log-softmax over axis 1 of `(N, C, ...)`.
    LogSoftmax,
    Sum,
    Mean,
    /// `(N, C, ...) -> (C)`: sums everything except the channel axis.
    ChannelSum,
    /// Parents: input, weight, and optionally bias.
    Conv3d { stride: usize, pad: usize },
    Upsample2,
    Concat,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Sigmoid => "sigmoid",
            Op::Clamp(..) => "clamp",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::ChannelSum => "channel_sum",
            Op::Conv3d { .. } => "conv3d",
            Op::Upsample2 => "upsample2",
            Op::Concat => "concat",
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Input | Op::Param(_) | Op::Constant)
    }
}

#[derive(Clone, Debug)]
pub struct Node<T: Real> {
    pub id: NodeId,
    pub op: Op,
    pub parents: Vec<NodeId>,
    pub value: Tensor<T>,
    /// Populated for differentiable leaves by [`Graph::backward`].
    pub grad: Option<Tensor<T>>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

fn nc_shape(op: &'static str, t: &Tensor<impl Real>) -> Result<(usize, usize, usize)> {
    split_nc(t.shape())
        .ok_or_else(|| HvedError::shape(op, format!("need (N, C, ...) input, got {:?}", t.shape())))
}

fn softmax_forward<T: Real>(x: &Tensor<T>, log: bool) -> Result<Tensor<T>> {
    let (n, c, s) = nc_shape(if log { "log_softmax" } else { "softmax" }, x)?;
    let mut out = vec![T::zero(); x.numel()];
    let d = x.data();
    for b in 0..n {
        let base = b * c * s;
        for v in 0..s {
            let mut max = T::neg_infinity();
            for ch in 0..c {
                max = max.max(d[base + ch * s + v]);
            }
            let mut denom = T::zero();
            for ch in 0..c {
                denom += (d[base + ch * s + v] - max).exp();
            }
            if log {
                let lse = max + denom.ln();
                for ch in 0..c {
                    out[base + ch * s + v] = d[base + ch * s + v] - lse;
                }
            } else {
                for ch in 0..c {
                    out[base + ch * s + v] = (d[base + ch * s + v] - max).exp() / denom;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Evaluates one operator on its parent values.
fn compute<T: Real>(op: &Op, ins: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let un = |f: &dyn Fn(T) -> T| ins[0].map(f);
    Ok(match op {
        Op::Input | Op::Param(_) | Op::Constant => unreachable!("leaves are fed, not computed"),
        Op::Add => ins[0].zip_map(ins[1], |a, b| a + b).map_err(|_| shape_err("add", ins))?,
        Op::Sub => ins[0].zip_map(ins[1], |a, b| a - b).map_err(|_| shape_err("sub", ins))?,
        Op::Mul => ins[0].zip_map(ins[1], |a, b| a * b).map_err(|_| shape_err("mul", ins))?,
        Op::Div => ins[0].zip_map(ins[1], |a, b| a / b).map_err(|_| shape_err("div", ins))?,
        Op::Neg => un(&|a| -a),
        Op::Exp => un(&|a| a.exp()),
        Op::Log => un(&|a| a.ln()),
        Op::Scale(c) => {
            let c = T::lit(*c);
            un(&|a| a * c)
        }
        Op::AddScalar(c) => {
            let c = T::lit(*c);
            un(&|a| a + c)
        }
        Op::LeakyRelu(slope) => {
            let s = T::lit(*slope);
            un(&|a| if a > T::zero() { a } else { a * s })
        }
        Op::Sigmoid => un(&|a| T::one() / (T::one() + (-a).exp())),
        Op::Clamp(lo, hi) => {
            let (lo, hi) = (T::lit(*lo), T::lit(*hi));
            un(&|a| a.max(lo).min(hi))
        }
        Op::Softmax => softmax_forward(ins[0], false)?,
        Op::LogSoftmax => softmax_forward(ins[0], true)?,
        Op::Sum => Tensor::scalar(ins[0].sum()),
        Op::Mean => Tensor::scalar(ins[0].mean()),
        Op::ChannelSum => {
            let (n, c, s) = nc_shape("channel_sum", ins[0])?;
            let mut out = vec![T::zero(); c];
            for b in 0..n {
                for (ch, o) in out.iter_mut().enumerate() {
                    let start = (b * c + ch) * s;
                    *o += ins[0].data()[start..start + s].iter().copied().sum::<T>();
                }
            }
            Tensor::new(vec![c], out)?
        }
        Op::Conv3d { stride, pad } => {
            kernels::conv3d_forward(ins[0], ins[1], ins.get(2).copied(), *stride, *pad)?
        }
        Op::Upsample2 => kernels::upsample2(ins[0])?,
        Op::Concat => kernels::concat_channels(ins)?,
    })
}

fn shape_err<T: Real>(op: &'static str, ins: &[&Tensor<T>]) -> HvedError {
    HvedError::shape(op, format!("{:?} vs {:?}", ins[0].shape(), ins[1].shape()))
}

/// Vector-Jacobian product: gradient contributions for each parent.
/// `need[i]` is false for parents that do not require a gradient.
fn vjp<T: Real>(
    op: &Op,
    ins: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
    need: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let zip = |a: &Tensor<T>, b: &Tensor<T>, f: &dyn Fn(T, T) -> T| a.zip_map(b, f);
    let mut res: Vec<Option<Tensor<T>>> = vec![None; ins.len()];
    match op {
        Op::Input | Op::Param(_) | Op::Constant => {}
        Op::Add => {
            res[0] = Some(g.clone());
            res[1] = Some(g.clone());
        }
        Op::Sub => {
            res[0] = Some(g.clone());
            res[1] = Some(g.map(|v| -v));
        }
        Op::Mul => {
            if need[0] {
                res[0] = Some(zip(g, ins[1], &|g, b| g * b)?);
            }
            if need[1] {
                res[1] = Some(zip(g, ins[0], &|g, a| g * a)?);
            }
        }
        Op::Div => {
            if need[0] {
                res[0] = Some(zip(g, ins[1], &|g, b| g / b)?);
            }
            if need[1] {
                // d(a/b)/db = -(a/b)/b
                let t = zip(g, out, &|g, y| g * y)?;
                res[1] = Some(zip(&t, ins[1], &|t, b| -t / b)?);
            }
        }
        Op::Neg => res[0] = Some(g.map(|v| -v)),
        Op::Exp => res[0] = Some(zip(g, out, &|g, y| g * y)?),
        Op::Log => res[0] = Some(zip(g, ins[0], &|g, x| g / x)?),
        Op::Scale(c) => {
            let c = T::lit(*c);
            res[0] = Some(g.map(|v| v * c));
        }
        Op::AddScalar(_) => res[0] = Some(g.clone()),
        Op::LeakyRelu(slope) => {
            let s = T::lit(*slope);
            res[0] = Some(zip(g, ins[0], &|g, x| if x > T::zero() { g } else { g * s })?);
        }
        Op::Sigmoid => res[0] = Some(zip(g, out, &|g, y| g * y * (T::one() - y))?),
        Op::Clamp(lo, hi) => {
            let (lo, hi) = (T::lit(*lo), T::lit(*hi));
            res[0] = Some(zip(g, ins[0], &|g, x| if x >= lo && x <= hi { g } else { T::zero() })?);
        }
        Op::Softmax | Op::LogSoftmax => {
            let (n, c, s) = nc_shape(op.name(), out)?;
            let (y, gd) = (out.data(), g.data());
            let mut dx = vec![T::zero(); out.numel()];
            for b in 0..n {
                let base = b * c * s;
                for v in 0..s {
                    let idx = |ch: usize| base + ch * s + v;
                    if matches!(op, Op::Softmax) {
                        // dx = y ⊙ (g − Σ g·y)
                        let mut dot = T::zero();
                        for ch in 0..c {
                            dot += gd[idx(ch)] * y[idx(ch)];
                        }
                        for ch in 0..c {
                            dx[idx(ch)] = y[idx(ch)] * (gd[idx(ch)] - dot);
                        }
                    } else {
                        // dx = g − softmax ⊙ Σ g
                        let mut total = T::zero();
                        for ch in 0..c {
                            total += gd[idx(ch)];
                        }
                        for ch in 0..c {
                            dx[idx(ch)] = gd[idx(ch)] - y[idx(ch)].exp() * total;
                        }
                    }
                }
            }
            res[0] = Some(Tensor::new(out.shape().to_vec(), dx)?);
        }
        Op::Sum => res[0] = Some(Tensor::full(ins[0].shape().to_vec(), g.item())),
        Op::Mean => {
            let v = g.item() / T::lit(ins[0].numel() as f64);
            res[0] = Some(Tensor::full(ins[0].shape().to_vec(), v));
        }
        Op::ChannelSum => {
            let (n, c, s) = nc_shape("channel_sum", ins[0])?;
            let mut dx = vec![T::zero(); ins[0].numel()];
            for b in 0..n {
                for ch in 0..c {
                    let start = (b * c + ch) * s;
                    dx[start..start + s].iter_mut().for_each(|v| *v = g.data()[ch]);
                }
            }
            res[0] = Some(Tensor::new(ins[0].shape().to_vec(), dx)?);
        }
        Op::Conv3d { stride, pad } => {
            let grads = kernels::conv3d_backward(ins[0], ins[1], g, *stride, *pad, need[0])?;
            res[0] = grads.dx;
            res[1] = Some(grads.dw);
            if ins.len() > 2 {
                res[2] = Some(grads.db);
            }
        }
        Op::Upsample2 => res[0] = Some(kernels::upsample2_backward(g, ins[0].shape())?),
        Op::Concat => {
            let shapes: Vec<Vec<usize>> = ins.iter().map(|t| t.shape().to_vec()).collect();
            for (i, t) in kernels::concat_backward(g, &shapes)?.into_iter().enumerate() {
                res[i] = Some(t);
            }
        }
    }
    Ok(res)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of a differentiable leaf after [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push_leaf(&mut self, op: Op, value: Tensor<T>) -> NodeId {
        let id = NodeId(self.nodes.len());
        let requires_grad = !matches!(op, Op::Constant);
        self.nodes.push(Node { id, op, parents: Vec::new(), value, grad: None, requires_grad });
        id
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(Op::Input, value)
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> NodeId {
        self.push_leaf(Op::Param(name.into()), value)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(Op::Constant, value)
    }

    fn push_op(&mut self, op: Op, parents: Vec<NodeId>) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        let value = {
            let ins: Vec<&Tensor<T>> = parents.iter().map(|p| &self.nodes[p.0].value).collect();
            compute(&op, &ins)?
        };
        if !value.all_finite() {
            return Err(HvedError::NonFinite { node: id.0, op: op.name() });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { id, op, parents, value, grad: None, requires_grad });
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Op::Add, vec![a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Op::Sub, vec![a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Op::Mul, vec![a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Op::Div, vec![a, b])
    }
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_op(Op::Neg, vec![a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_op(Op::Exp, vec![a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_op(Op::Log, vec![a])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push_op(Op::Scale(c), vec![a])
    }
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push_op(Op::AddScalar(c), vec![a])
    }
    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.push_op(Op::LeakyRelu(slope), vec![a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_op(Op::Sigmoid, vec![a])
    }
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.push_op(Op::Clamp(lo, hi), vec![a])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_op(Op::Softmax, vec![a])
    }
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_op(Op::LogSoftmax, vec![a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_op(Op::Sum, vec![a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_op(Op::Mean, vec![a])
    }
    pub fn channel_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_op(Op::ChannelSum, vec![a])
    }
    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push_op(Op::Conv3d { stride, pad }, parents)
    }
    pub fn upsample2(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_op(Op::Upsample2, vec![a])
    }
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push_op(Op::Concat, parts.to_vec())
    }

    /// Sum of several same-shaped nodes, accumulated left to right.
    pub fn add_all(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| HvedError::InvalidArgument("add_all of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &p| self.add(acc, p))
    }

    /// Replays every operator with new leaf values. Leaves not present in
    /// `feeds` keep their current value.
    pub fn forward(&mut self, feeds: &HashMap<NodeId, Tensor<T>>) -> Result<()> {
        for (id, t) in feeds {
            let node = self
                .nodes
                .get_mut(id.0)
                .ok_or_else(|| HvedError::InvalidArgument(format!("no node {id}")))?;
            if !node.op.is_leaf() {
                return Err(HvedError::InvalidArgument(format!("node {id} is not a leaf")));
            }
            if node.value.shape() != t.shape() {
                return Err(HvedError::shape(
                    "forward",
                    format!("feed for {id}: {:?} vs {:?}", t.shape(), node.value.shape()),
                ));
            }
            node.value = t.clone();
        }
        for i in 0..self.nodes.len() {
            if self.nodes[i].op.is_leaf() {
                continue;
            }
            let value = {
                let node = &self.nodes[i];
                let ins: Vec<&Tensor<T>> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                compute(&node.op, &ins)?
            };
            if !value.all_finite() {
                return Err(HvedError::NonFinite { node: i, op: self.nodes[i].op.name() });
            }
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Back-propagates from a scalar `loss`, storing gradients on every
    /// differentiable leaf (zero for leaves the loss does not reach).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(HvedError::NonScalarLoss { node: loss.0, shape: loss_node.value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(loss_node.value.shape().to_vec()));
        for node in &mut self.nodes {
            node.grad = None;
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].op.is_leaf() {
                if self.nodes[i].requires_grad {
                    self.nodes[i].grad = Some(g);
                }
                continue;
            }
            let node = &self.nodes[i];
            let ins: Vec<&Tensor<T>> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let need: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let contributions = vjp(&node.op, &ins, &node.value, &g, &need)?;
            for ((p, c), needed) in node.parents.clone().into_iter().zip(contributions).zip(need) {
                let Some(c) = c else { continue };
                if !needed {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(c.data()) {
                            *a += *v;
                        }
                    }
                    slot => *slot = Some(c),
                }
            }
        }
        for node in &mut self.nodes {
            if node.op.is_leaf() && node.requires_grad && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(())
    }

    /// Gradients of every named parameter present in the graph.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.nodes
            .iter()
            .filter_map(|n| match (&n.op, &n.grad) {
                (Op::Param(name), Some(g)) => Some((name.clone(), g.clone())),
                _ => None,
            })
            .collect()
    }
}
