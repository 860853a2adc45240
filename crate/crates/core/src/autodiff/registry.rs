use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Node, NodeId, Op, OpKind};
use crate::tensor::{ReduceOp, Real, Shape, Tensor, UnaryOp};

/// Builds the gradient node for input `slot` of `node` from the upstream
/// adjoint. Forward node ids are valid in the graph being extended.
pub type BackwardFn = fn(&mut Graph, &Node, usize, NodeId) -> Result<NodeId>;

#[derive(Clone, Copy)]
pub struct BpropRule {
    pub backward: BackwardFn,
    /// Whether the op's output is linear in the given input slot.
    pub linear_in: fn(usize) -> bool,
}

impl std::fmt::Debug for BpropRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BpropRule").finish_non_exhaustive()
    }
}

#[derive(Clone, Debug)]
pub struct BpropRegistry {
    rules: HashMap<OpKind, BpropRule>,
}

impl Default for BpropRegistry {
    fn default() -> Self {
        Self::standard()
    }
}

fn linear(_: usize) -> bool {
    true
}

fn nonlinear(_: usize) -> bool {
    false
}

impl BpropRegistry {
    pub fn empty() -> Self {
        BpropRegistry { rules: HashMap::new() }
    }

    /// Rules for every forward op the models use.
    pub fn standard() -> Self {
        use OpKind::*;
        let mut r = Self::empty();
        let table: [(OpKind, BackwardFn, fn(usize) -> bool); 22] = [
            (MatMul, matmul, linear),
            (Conv2d, conv2d, linear),
            (BiasAdd, bias_add, linear),
            (ScaleChannels, scale_channels, linear),
            (Add, add, linear),
            (Sub, sub, linear),
            (Mul, mul, linear),
            (AddN, add_n, linear),
            (Relu, relu, nonlinear),
            (Sqrt, sqrt, nonlinear),
            (Square, square, nonlinear),
            (Reciprocal, reciprocal, nonlinear),
            (Identity, identity, linear),
            (ReduceSum, reduce, linear),
            (ReduceMean, reduce, linear),
            (Broadcast, broadcast, linear),
            (Reshape, reshape, linear),
            (MaxPool2d, max_pool2d, nonlinear),
            (ShortcutPad, shortcut_pad, linear),
            (SoftmaxCrossEntropy, softmax_cross_entropy, nonlinear),
            (Conv2dBackpropInput, conv2d_backprop_input, linear),
            (Conv2dBackpropFilter, conv2d_backprop_filter, linear),
        ];
        for (kind, backward, linear_in) in table {
            r.register(kind, BpropRule { backward, linear_in });
        }
        r
    }

    /// Installs or replaces a rule, returning the previous one.
    pub fn register(&mut self, kind: OpKind, rule: BpropRule) -> Option<BpropRule> {
        self.rules.insert(kind, rule)
    }

    /// Fault injection: replaces the rule for `kind` with one whose result
    /// is off by a factor of 1.5. Used to exercise the checkers.
    pub fn corrupt(&mut self, kind: OpKind) -> Result<()> {
        let linear_in = self.get(kind)?.linear_in;
        self.register(kind, BpropRule { backward: corrupted, linear_in });
        Ok(())
    }

    pub fn get(&self, kind: OpKind) -> Result<&BpropRule> {
        self.rules.get(&kind).ok_or_else(|| Error::UnsupportedOp(kind.name().to_string()))
    }

    pub fn contains(&self, kind: OpKind) -> bool {
        self.rules.contains_key(&kind)
    }
}

/// Sums a gradient down to `target` when the forward op broadcast a scalar.
fn reduce_to(g: &mut Graph, grad: NodeId, target: &Shape) -> Result<NodeId> {
    if g.shape(grad) == target {
        Ok(grad)
    } else if target.is_scalar() {
        g.sum_all(grad)
    } else {
        Err(Error::ShapeMismatch { op: "reduce_to", lhs: g.shape(grad).clone(), rhs: target.clone() })
    }
}

fn scaled(g: &mut Graph, x: NodeId, factor: Real) -> Result<NodeId> {
    let c = g.scalar(factor);
    g.mul(x, c)
}

fn all_but_last(g: &Graph, x: NodeId) -> Vec<usize> {
    (0..g.shape(x).rank().saturating_sub(1)).collect()
}

fn matmul(g: &mut Graph, n: &Node, slot: usize, u: NodeId) -> Result<NodeId> {
    let Op::MatMul { trans_a, trans_b } = n.op else { unreachable!() };
    let (a, b) = (n.inputs[0], n.inputs[1]);
    let (op, lhs, rhs) = match (slot, trans_a, trans_b) {
        (0, false, tb) => (Op::MatMul { trans_a: false, trans_b: !tb }, u, b),
        (0, true, tb) => (Op::MatMul { trans_a: tb, trans_b: true }, b, u),
        (_, ta, false) => (Op::MatMul { trans_a: !ta, trans_b: false }, a, u),
        (_, ta, true) => (Op::MatMul { trans_a: true, trans_b: ta }, u, a),
    };
    g.add_node(op, &[lhs, rhs])
}

fn conv2d(g: &mut Graph, n: &Node, slot: usize, u: NodeId) -> Result<NodeId> {
    let Op::Conv2d { stride, padding } = n.op else { unreachable!() };
    let (x, k) = (n.inputs[0], n.inputs[1]);
    if slot == 0 {
        let input_dims = g.shape(x).dims().to_vec();
        g.add_node(Op::Conv2dBackpropInput { stride, padding, input_dims }, &[u, k])
    } else {
        let kernel_dims = g.shape(k).dims().to_vec();
        g.add_node(Op::Conv2dBackpropFilter { stride, padding, kernel_dims }, &[x, u])
    }
}

fn conv2d_backprop_input(g: &mut Graph, n: &Node, slot: usize, u: NodeId) -> Result<NodeId> {
    let Op::Conv2dBackpropInput { stride, padding, .. } = n.op else { unreachable!() };
    let (up, k) = (n.inputs[0], n.inputs[1]);
    if slot == 0 {
        g.add_node(Op::Conv2d { stride, padding }, &[u, k])
    } else {
        let kernel_dims = g.shape(k).dims().to_vec();
        g.add_node(Op::Conv2dBackpropFilter { stride, padding, kernel_dims }, &[u, up])
    }
}

fn conv2d_backprop_filter(g: &mut Graph, n: &Node, slot: usize, u: NodeId) -> Result<NodeId> {
    let Op::Conv2dBackpropFilter { stride, padding, .. } = n.op else { unreachable!() };
    let (x, up) = (n.inputs[0], n.inputs[1]);
    if slot == 0 {
        let input_dims = g.shape(x).dims().to_vec();
        g.add_node(Op::Conv2dBackpropInput { stride, padding, input_dims }, &[up, u])
    } else {
        g.add_node(Op::Conv2d { stride, padding }, &[x, u])
    }
}

fn bias_add(g: &mut Graph, n: &Node, slot: usize, u: NodeId) -> Result<NodeId> {
    if slot == 0 {
        return Ok(u);
    }
    let axes = all_but_last(g, n.inputs[0]);
    g.reduce_sum(u, &axes)
}

fn scale_channels(g: &mut Graph, n: &Node, slot: usize, u: NodeId) -> Result<NodeId> {
    let (x, gamma) = (n.inputs[0], n.inputs[1]);
    if slot == 0 {
        return g.scale_channels(u, gamma);
    }
    let prod = g.mul(u, x)?;
    let axes = all_but_last(g, x);
    g.reduce_sum(prod, &axes)
}

fn add(g: &mut Graph, n: &Node, slot: usize, u: NodeId) -> Result<NodeId> {
    let target = g.shape(n.inputs[slot]).clone();
    reduce_to(g, u, &target)
}

fn sub(g: &mut Graph, n: &Node, slot: usize, u: NodeId) -> Result<NodeId> {
    let target = g.shape(n.inputs[slot]).clone();
    let grad = if slot == 0 { u } else { scaled(g, u, -1.0)? };
    reduce_to(g, grad, &target)
}

fn mul(g: &mut Graph, n: &Node, slot: usize, u: NodeId) -> Result<NodeId> {
    let other = n.inputs[1 - slot];
    let target = g.shape(n.inputs[slot]).clone();
    let grad = g.mul(u, other)?;
    reduce_to(g, grad, &target)
}

fn add_n(_: &mut Graph, _: &Node, _: usize, u: NodeId) -> Result<NodeId> {
    Ok(u)
}

fn identity(_: &mut Graph, _: &Node, _: usize, u: NodeId) -> Result<NodeId> {
    Ok(u)
}

fn relu(g: &mut Graph, n: &Node, _: usize, u: NodeId) -> Result<NodeId> {
    g.add_node(Op::ReluGrad, &[u, n.inputs[0]])
}

fn sqrt(g: &mut Graph, n: &Node, _: usize, u: NodeId) -> Result<NodeId> {
    let inv = g.unary(UnaryOp::Reciprocal, n.id)?;
    let half = scaled(g, inv, 0.5)?;
    g.mul(u, half)
}

fn square(g: &mut Graph, n: &Node, _: usize, u: NodeId) -> Result<NodeId> {
    let twice = scaled(g, n.inputs[0], 2.0)?;
    g.mul(u, twice)
}

fn reciprocal(g: &mut Graph, n: &Node, _: usize, u: NodeId) -> Result<NodeId> {
    let sq = g.square(n.id)?;
    let neg = scaled(g, sq, -1.0)?;
    g.mul(u, neg)
}

fn reduce(g: &mut Graph, n: &Node, _: usize, u: NodeId) -> Result<NodeId> {
    let Op::Reduce { op, axes, .. } = &n.op else { unreachable!() };
    let dims = g.shape(n.inputs[0]).dims().to_vec();
    let upstream = match op {
        ReduceOp::Sum => u,
        ReduceOp::Mean => {
            let count: usize = axes.iter().map(|&a| dims[a]).product();
            scaled(g, u, 1.0 / count.max(1) as Real)?
        }
    };
    g.add_node(Op::Broadcast { dims, axes: axes.clone() }, &[upstream])
}

fn broadcast(g: &mut Graph, n: &Node, _: usize, u: NodeId) -> Result<NodeId> {
    let Op::Broadcast { axes, .. } = &n.op else { unreachable!() };
    let keep_dims = g.shape(n.inputs[0]).rank() == n.shape.rank();
    g.add_node(Op::Reduce { op: ReduceOp::Sum, axes: axes.clone(), keep_dims }, &[u])
}

fn reshape(g: &mut Graph, n: &Node, _: usize, u: NodeId) -> Result<NodeId> {
    let dims = g.shape(n.inputs[0]).dims().to_vec();
    g.reshape(u, &dims)
}

fn max_pool2d(g: &mut Graph, n: &Node, _: usize, u: NodeId) -> Result<NodeId> {
    let Op::MaxPool2d { size, stride } = n.op else { unreachable!() };
    g.add_node(Op::MaxPool2dGrad { size, stride }, &[u, n.inputs[0]])
}

fn shortcut_pad(g: &mut Graph, n: &Node, _: usize, u: NodeId) -> Result<NodeId> {
    let Op::ShortcutPad { stride, .. } = n.op else { unreachable!() };
    let input_dims = g.shape(n.inputs[0]).dims().to_vec();
    g.add_node(Op::ShortcutPadGrad { stride, input_dims }, &[u])
}

fn softmax_cross_entropy(g: &mut Graph, n: &Node, slot: usize, u: NodeId) -> Result<NodeId> {
    g.add_node(Op::SoftmaxCrossEntropyGrad { wrt_labels: slot == 1 }, &[u, n.inputs[0], n.inputs[1]])
}

/// A zero constant of the given shape.
pub(crate) fn zeros(g: &mut Graph, shape: &Shape) -> NodeId {
    g.constant(Tensor::zeros(shape))
}

fn corrupted(g: &mut Graph, node: &Node, slot: usize, upstream: NodeId) -> Result<NodeId> {
    let standard = BpropRegistry::standard();
    let grad = (standard.get(node.op.kind())?.backward)(g, node, slot, upstream)?;
    let factor = g.scalar(1.5);
    g.mul(factor, grad)
}
