//! Computational-graph IR.
//!
//! A [`Graph`] is an append-only table of value nodes. Every node records the
//! operation that produced it and the ids of its inputs, so the table itself
//! is the DAG. Leaves are trainable parameters, data inputs or constants;
//! everything else is a hidden value, except the single scalar output.
//!
//! The graph also answers the structural questions the virtual-gradient pass
//! needs: which hidden nodes sit one edge away from a parameter (the
//! frontier), and which of those carry a minibatch axis.

mod eval;
mod ops;
mod passes;
mod text;

pub use eval::Values;
pub use ops::{Op, OpKind};
pub use passes::wrap_output_parameters;
pub use text::{parse_text, to_text};

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::tensor::{BinaryOp, Padding, ReduceOp, Real, Shape, Tensor, UnaryOp};

/// Dense index of a node within its graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    LeafParameter,
    DataInput,
    Constant,
    Hidden,
    Output,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::LeafParameter => "param",
            Role::DataInput => "input",
            Role::Constant => "const",
            Role::Hidden => "hidden",
            Role::Output => "output",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub id: NodeId,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Shape,
    pub role: Role,
}

/// A hidden node fed directly by at least one parameter, with its inputs split
/// into parameter slots and the remaining (non-parameter) slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrontierNode {
    pub id: NodeId,
    /// `(input slot, parameter id)` pairs.
    pub params: Vec<(usize, NodeId)>,
    /// `(input slot, node id)` pairs for every other input.
    pub others: Vec<(usize, NodeId)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LintIssue {
    NoOutput,
    /// A parameter consumed directly by the output op has no frontier node.
    ParameterAtOutput { param: NodeId, output: NodeId },
}

impl fmt::Display for LintIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LintIssue::NoOutput => write!(f, "graph has no output node"),
            LintIssue::ParameterAtOutput { param, output } => {
                write!(f, "parameter {param} feeds the output op {output} directly")
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    output: Option<NodeId>,
    topo: OnceLock<std::result::Result<Vec<NodeId>, NodeId>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a graph from a raw node table without checking ordering. Used by
    /// the text parser; `topo_order` reports any cycle.
    pub(crate) fn from_nodes(nodes: Vec<Node>, output: Option<NodeId>) -> Self {
        Graph { nodes, output, topo: OnceLock::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id))
    }

    pub fn shape(&self, id: NodeId) -> &Shape {
        &self.nodes[id.0].shape
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Shape, role: Role) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { id, op, inputs, shape, role });
        self.topo = OnceLock::new();
        id
    }

    /// Appends an operation node, inferring its shape from its inputs.
    pub fn add_node(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if op.is_leaf() {
            return Err(Error::Structure(format!("{} nodes are created with the leaf constructors", op.name())));
        }
        let shapes = inputs
            .iter()
            .map(|&i| self.node(i).map(|n| &n.shape))
            .collect::<Result<Vec<_>>>()?;
        let shape = op.infer_shape(&shapes)?;
        Ok(self.push(op, inputs.to_vec(), shape, Role::Hidden))
    }

    pub fn parameter(&mut self, name: impl Into<String>, dims: impl Into<Vec<usize>>) -> Result<NodeId> {
        let shape = Shape::new(dims)?;
        Ok(self.push(Op::Parameter { name: name.into() }, Vec::new(), shape, Role::LeafParameter))
    }

    pub fn input(&mut self, name: impl Into<String>, dims: impl Into<Vec<usize>>, batched: bool) -> Result<NodeId> {
        let shape = Shape::new(dims)?;
        Ok(self.push(Op::Input { name: name.into(), batched }, Vec::new(), shape, Role::DataInput))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().clone();
        self.push(Op::Constant(value), Vec::new(), shape, Role::Constant)
    }

    pub fn scalar(&mut self, value: Real) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// Marks `id` as the scalar objective. Any previous output reverts to hidden.
    pub fn set_output(&mut self, id: NodeId) -> Result<()> {
        let node = self.node(id)?;
        if !node.shape.is_scalar() {
            return Err(Error::Structure(format!("output must be scalar, node {id} has shape {}", node.shape)));
        }
        if node.op.is_leaf() {
            return Err(Error::Structure("output must be computed by an operation".into()));
        }
        if let Some(old) = self.output.replace(id) {
            self.nodes[old.0].role = Role::Hidden;
        }
        self.nodes[id.0].role = Role::Output;
        Ok(())
    }

    pub fn parameters(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.role == Role::LeafParameter).map(|n| n.id).collect()
    }

    pub fn data_inputs(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.role == Role::DataInput).map(|n| n.id).collect()
    }

    /// Finds a parameter or input by name.
    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().find_map(|n| match &n.op {
            Op::Parameter { name: nm } | Op::Input { name: nm, .. } if nm == name => Some(n.id),
            _ => None,
        })
    }

    /// Topological order, ties broken by ascending id.
    pub fn topo_order(&self) -> Result<&[NodeId]> {
        self.topo
            .get_or_init(|| self.kahn())
            .as_deref()
            .map_err(|&id| Error::Cycle(id))
    }

    fn kahn(&self) -> std::result::Result<Vec<NodeId>, NodeId> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut consumers = vec![Vec::new(); n];
        for node in &self.nodes {
            for &i in &node.inputs {
                indegree[node.id.0] += 1;
                consumers[i.0].push(node.id.0);
            }
        }
        let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(i)) = ready.pop() {
            order.push(NodeId(i));
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
        if order.len() < n {
            let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap_or(0);
            return Err(NodeId(stuck));
        }
        Ok(order)
    }

    /// Consumers of every node, in ascending id order.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for node in &self.nodes {
            for &i in &node.inputs {
                if out[i.0].last() != Some(&node.id) {
                    out[i.0].push(node.id);
                }
            }
        }
        out
    }

    /// The hidden nodes at distance one from a parameter, by ascending id.
    pub fn frontier(&self) -> Vec<FrontierNode> {
        self.nodes
            .iter()
            .filter(|n| n.role == Role::Hidden)
            .filter_map(|n| {
                let (params, others): (Vec<_>, Vec<_>) = n
                    .inputs
                    .iter()
                    .copied()
                    .enumerate()
                    .partition(|(_, i)| self.nodes[i.0].role == Role::LeafParameter);
                (!params.is_empty()).then(|| FrontierNode { id: n.id, params, others })
            })
            .collect()
    }

    /// Structural problems that would leave a parameter without a frontier node.
    pub fn lint(&self) -> Vec<LintIssue> {
        let Some(out) = self.output else {
            return vec![LintIssue::NoOutput];
        };
        self.nodes[out.0]
            .inputs
            .iter()
            .filter(|i| self.nodes[i.0].role == Role::LeafParameter)
            .map(|&param| LintIssue::ParameterAtOutput { param, output: out })
            .collect()
    }

    /// Per node: whether its value has a leading minibatch axis, i.e. it has
    /// rank ≥ 1 and depends on a batched data input.
    pub fn batch_axis_flags(&self) -> Result<Vec<bool>> {
        let mut dep = vec![false; self.nodes.len()];
        for &id in self.topo_order()? {
            let node = &self.nodes[id.0];
            dep[id.0] = match node.op {
                Op::Input { batched, .. } => batched,
                _ => node.inputs.iter().any(|i| dep[i.0]),
            };
        }
        Ok(dep.into_iter().zip(&self.nodes).map(|(d, n)| d && n.shape.rank() >= 1).collect())
    }

    /// Per node: whether it depends (transitively) on some parameter.
    pub fn parameter_dependence(&self) -> Result<Vec<bool>> {
        let mut dep = vec![false; self.nodes.len()];
        for &id in self.topo_order()? {
            let node = &self.nodes[id.0];
            dep[id.0] = node.role == Role::LeafParameter || node.inputs.iter().any(|i| dep[i.0]);
        }
        Ok(dep)
    }

    /// Total element count over all parameters.
    pub fn parameter_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.role == Role::LeafParameter).map(|n| n.shape.numel()).sum()
    }

    // Convenience builders.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_node(Op::MatMul { trans_a: false, trans_b: false }, &[a, b])
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, padding: Padding) -> Result<NodeId> {
        self.add_node(Op::Conv2d { stride, padding }, &[x, k])
    }

    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_node(Op::BiasAdd, &[x, b])
    }

    pub fn scale_channels(&mut self, x: NodeId, g: NodeId) -> Result<NodeId> {
        self.add_node(Op::ScaleChannels, &[x, g])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_node(Op::Binary(BinaryOp::Add), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_node(Op::Binary(BinaryOp::Sub), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_node(Op::Binary(BinaryOp::Mul), &[a, b])
    }

    pub fn unary(&mut self, op: UnaryOp, x: NodeId) -> Result<NodeId> {
        self.add_node(Op::Unary(op), &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Square, x)
    }

    pub fn identity(&mut self, x: NodeId) -> Result<NodeId> {
        self.add_node(Op::Identity, &[x])
    }

    pub fn reduce_sum(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.add_node(Op::Reduce { op: ReduceOp::Sum, axes: axes.to_vec(), keep_dims: false }, &[x])
    }

    pub fn reduce_mean(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.add_node(Op::Reduce { op: ReduceOp::Mean, axes: axes.to_vec(), keep_dims: false }, &[x])
    }

    /// Sum over every axis, giving a scalar.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let axes: Vec<usize> = (0..self.shape(x).rank()).collect();
        self.reduce_sum(x, &axes)
    }

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        self.add_node(Op::Reshape { dims: dims.to_vec() }, &[x])
    }

    pub fn max_pool2d(&mut self, x: NodeId, size: usize, stride: usize) -> Result<NodeId> {
        self.add_node(Op::MaxPool2d { size, stride }, &[x])
    }

    pub fn shortcut_pad(&mut self, x: NodeId, stride: usize, channels_out: usize) -> Result<NodeId> {
        self.add_node(Op::ShortcutPad { stride, channels_out }, &[x])
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: NodeId) -> Result<NodeId> {
        self.add_node(Op::SoftmaxCrossEntropy, &[logits, labels])
    }
}
