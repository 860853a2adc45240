//! Line-oriented text form of a graph, one node per line:
//!
//! ```text
//! 2 hidden matmul(trans_a=false,trans_b=false) inputs=[0;1] shape=[4;2]
//! ```
//!
//! Lists use `;` as separator. Blank lines and lines starting with `#` are
//! ignored. Names must not contain whitespace, `,`, `=`, `(` or `)`.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::{Graph, Node, NodeId, Op, Role};
use crate::error::{Error, Result};
use crate::tensor::{BinaryOp, Padding, ReduceOp, Real, Shape, Tensor, UnaryOp};

fn list<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

fn attrs(op: &Op) -> String {
    match op {
        Op::Parameter { name } => format!("name={name}"),
        Op::Input { name, batched } => format!("name={name},batched={batched}"),
        Op::Constant(t) => {
            let data: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
            format!("dims={},data={}", list(t.dims()), data.join(";"))
        }
        Op::MatMul { trans_a, trans_b } => format!("trans_a={trans_a},trans_b={trans_b}"),
        Op::Conv2d { stride, padding } => format!("stride={stride},padding={}", padding.name()),
        Op::Conv2dBackpropInput { stride, padding, input_dims } => {
            format!("stride={stride},padding={},input_dims={}", padding.name(), list(input_dims))
        }
        Op::Conv2dBackpropFilter { stride, padding, kernel_dims } => {
            format!("stride={stride},padding={},kernel_dims={}", padding.name(), list(kernel_dims))
        }
        Op::Reduce { axes, keep_dims, .. } => format!("axes={},keep_dims={keep_dims}", list(axes)),
        Op::Broadcast { dims, axes } => format!("dims={},axes={}", list(dims), list(axes)),
        Op::Reshape { dims } => format!("dims={}", list(dims)),
        Op::MaxPool2d { size, stride } | Op::MaxPool2dGrad { size, stride } => format!("size={size},stride={stride}"),
        Op::ShortcutPad { stride, channels_out } => format!("stride={stride},channels_out={channels_out}"),
        Op::ShortcutPadGrad { stride, input_dims } => format!("stride={stride},input_dims={}", list(input_dims)),
        Op::SoftmaxCrossEntropyGrad { wrt_labels } => format!("wrt_labels={wrt_labels}"),
        _ => String::new(),
    }
}

pub fn to_text(graph: &Graph) -> String {
    let mut out = String::new();
    for node in &graph.nodes {
        let ids: Vec<usize> = node.inputs.iter().map(|i| i.0).collect();
        let _ = writeln!(
            out,
            "{} {} {}({}) inputs=[{}] shape=[{}]",
            node.id,
            node.role.name(),
            node.op.name(),
            attrs(&node.op),
            list(&ids),
            list(node.shape.dims()),
        );
    }
    out
}

struct Attrs<'a> {
    line: usize,
    map: HashMap<&'a str, &'a str>,
}

impl<'a> Attrs<'a> {
    fn parse(line: usize, body: &'a str) -> Result<Self> {
        let mut map = HashMap::new();
        for kv in body.split(',').filter(|s| !s.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| err(line, format!("malformed attribute `{kv}`")))?;
            map.insert(k, v);
        }
        Ok(Attrs { line, map })
    }

    fn raw(&self, key: &str) -> Result<&'a str> {
        self.map.get(key).copied().ok_or_else(|| err(self.line, format!("missing attribute `{key}`")))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| err(self.line, format!("bad value `{v}` for `{key}`")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        parse_list(self.line, self.raw(key)?)
    }

    fn padding(&self) -> Result<Padding> {
        match self.raw("padding")? {
            "valid" => Ok(Padding::Valid),
            "same" => Ok(Padding::Same),
            other => Err(err(self.line, format!("unknown padding `{other}`"))),
        }
    }
}

fn err(line: usize, detail: impl Into<String>) -> Error {
    Error::Parse { line, detail: detail.into() }
}

fn parse_list<T: std::str::FromStr>(line: usize, s: &str) -> Result<Vec<T>> {
    s.split(';')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| err(line, format!("bad list element `{t}`"))))
        .collect()
}

fn bracketed<'a>(line: usize, token: &'a str, key: &str) -> Result<&'a str> {
    token
        .strip_prefix(key)
        .and_then(|t| t.strip_prefix("=["))
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| err(line, format!("expected `{key}=[...]`, found `{token}`")))
}

fn parse_op(line: usize, token: &str) -> Result<Op> {
    let (name, body) = token
        .strip_suffix(')')
        .and_then(|t| t.split_once('('))
        .ok_or_else(|| err(line, format!("malformed op `{token}`")))?;
    let a = Attrs::parse(line, body)?;
    let reduce = |op| -> Result<Op> { Ok(Op::Reduce { op, axes: a.list("axes")?, keep_dims: a.get("keep_dims")? }) };
    Ok(match name {
        "param" => Op::Parameter { name: a.raw("name")?.to_string() },
        "input" => Op::Input { name: a.raw("name")?.to_string(), batched: a.get("batched")? },
        "const" => Op::Constant(
            Tensor::new(a.list::<usize>("dims")?, a.list::<Real>("data")?).map_err(|e| err(line, e.to_string()))?,
        ),
        "matmul" => Op::MatMul { trans_a: a.get("trans_a")?, trans_b: a.get("trans_b")? },
        "conv2d" => Op::Conv2d { stride: a.get("stride")?, padding: a.padding()? },
        "conv2d_backprop_input" => {
            Op::Conv2dBackpropInput { stride: a.get("stride")?, padding: a.padding()?, input_dims: a.list("input_dims")? }
        }
        "conv2d_backprop_filter" => {
            Op::Conv2dBackpropFilter { stride: a.get("stride")?, padding: a.padding()?, kernel_dims: a.list("kernel_dims")? }
        }
        "bias_add" => Op::BiasAdd,
        "scale_channels" => Op::ScaleChannels,
        "add" => Op::Binary(BinaryOp::Add),
        "sub" => Op::Binary(BinaryOp::Sub),
        "mul" => Op::Binary(BinaryOp::Mul),
        "add_n" => Op::AddN,
        "relu" => Op::Unary(UnaryOp::Relu),
        "sqrt" => Op::Unary(UnaryOp::Sqrt),
        "square" => Op::Unary(UnaryOp::Square),
        "reciprocal" => Op::Unary(UnaryOp::Reciprocal),
        "relu_grad" => Op::ReluGrad,
        "identity" => Op::Identity,
        "reduce_sum" => reduce(ReduceOp::Sum)?,
        "reduce_mean" => reduce(ReduceOp::Mean)?,
        "broadcast" => Op::Broadcast { dims: a.list("dims")?, axes: a.list("axes")? },
        "reshape" => Op::Reshape { dims: a.list("dims")? },
        "max_pool2d" => Op::MaxPool2d { size: a.get("size")?, stride: a.get("stride")? },
        "max_pool2d_grad" => Op::MaxPool2dGrad { size: a.get("size")?, stride: a.get("stride")? },
        "shortcut_pad" => Op::ShortcutPad { stride: a.get("stride")?, channels_out: a.get("channels_out")? },
        "shortcut_pad_grad" => Op::ShortcutPadGrad { stride: a.get("stride")?, input_dims: a.list("input_dims")? },
        "softmax_cross_entropy" => Op::SoftmaxCrossEntropy,
        "softmax_cross_entropy_grad" => Op::SoftmaxCrossEntropyGrad { wrt_labels: a.get("wrt_labels")? },
        other => return Err(err(line, format!("unknown op `{other}`"))),
    })
}

fn parse_role(line: usize, s: &str) -> Result<Role> {
    Ok(match s {
        "param" => Role::LeafParameter,
        "input" => Role::DataInput,
        "const" => Role::Constant,
        "hidden" => Role::Hidden,
        "output" => Role::Output,
        other => return Err(err(line, format!("unknown role `{other}`"))),
    })
}

/// Parses the text form. Shapes of computed nodes are re-inferred and must
/// match the declared ones. Cycles are accepted here and surface later from
/// [`Graph::topo_order`].
pub fn parse_text(text: &str) -> Result<Graph> {
    let mut nodes = Vec::new();
    let mut lines = Vec::new();
    let mut output = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        let &[id, role, op, inputs, shape] = tokens.as_slice() else {
            return Err(err(line, format!("expected 5 fields, found {}", tokens.len())));
        };
        let id: usize = id.parse().map_err(|_| err(line, format!("bad node id `{id}`")))?;
        if id != nodes.len() {
            return Err(err(line, format!("expected node id {}, found {id}", nodes.len())));
        }
        let role = parse_role(line, role)?;
        let op = parse_op(line, op)?;
        let inputs: Vec<NodeId> = parse_list::<usize>(line, bracketed(line, inputs, "inputs")?)?.into_iter().map(NodeId).collect();
        let shape = Shape::new(parse_list::<usize>(line, bracketed(line, shape, "shape")?)?)?;
        let expected_role = match op {
            Op::Parameter { .. } => Some(Role::LeafParameter),
            Op::Input { .. } => Some(Role::DataInput),
            Op::Constant(_) => Some(Role::Constant),
            _ => None,
        };
        match expected_role {
            Some(r) if r != role || !inputs.is_empty() => {
                return Err(err(line, format!("leaf {} must have role {} and no inputs", op.name(), r.name())));
            }
            None if !matches!(role, Role::Hidden | Role::Output) => {
                return Err(err(line, format!("op {} cannot have role {}", op.name(), role.name())));
            }
            _ => {}
        }
        if let Op::Constant(t) = &op {
            if t.shape() != &shape {
                return Err(err(line, "constant payload does not match declared shape"));
            }
        }
        if role == Role::Output {
            if output.replace(NodeId(id)).is_some() {
                return Err(err(line, "more than one output node"));
            }
            if !shape.is_scalar() {
                return Err(err(line, "output must be scalar"));
            }
        }
        nodes.push(Node { id: NodeId(id), op, inputs, shape, role });
        lines.push(line);
    }
    for (node, &line) in nodes.iter().zip(&lines) {
        if node.op.is_leaf() {
            continue;
        }
        let shapes = node
            .inputs
            .iter()
            .map(|i| nodes.get(i.0).map(|n| &n.shape).ok_or_else(|| err(line, format!("unknown input {i}"))))
            .collect::<Result<Vec<_>>>()?;
        let inferred = node.op.infer_shape(&shapes).map_err(|e| err(line, e.to_string()))?;
        if inferred != node.shape {
            return Err(err(line, format!("declared shape {} but inputs give {inferred}", node.shape)));
        }
    }
    Ok(Graph::from_nodes(nodes, output))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Graph {
        let mut g = Graph::new();
        let x = g.input("x", vec![4, 3], true).unwrap();
        let w = g.parameter("w", vec![3, 2]).unwrap();
        let b = g.parameter("b", vec![2]).unwrap();
        let y = g.matmul(x, w).unwrap();
        let z = g.bias_add(y, b).unwrap();
        let c = g.constant(Tensor::new(vec![4, 2], vec![0.1, -0.0, 1e-300, 2.5, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let d = g.sub(z, c).unwrap();
        let e = g.add_node(Op::Reduce { op: ReduceOp::Mean, axes: vec![0], keep_dims: true }, &[d]).unwrap();
        let j = g.sum_all(e).unwrap();
        g.set_output(j).unwrap();
        g
    }

    #[test]
    fn round_trip_is_exact() {
        let g = sample();
        let text = to_text(&g);
        let h = parse_text(&text).unwrap();
        assert_eq!(to_text(&h), text);
        assert_eq!(h.output(), g.output());
        for (a, b) in g.nodes().iter().zip(h.nodes()) {
            assert_eq!(a.op, b.op);
            assert_eq!(a.inputs, b.inputs);
        }
    }

    #[test]
    fn wrong_declared_shape_is_rejected() {
        let text = to_text(&sample()).replace("shape=[4;2]", "shape=[4;3]");
        assert!(matches!(parse_text(&text), Err(Error::Parse { .. })));
    }

    #[test]
    fn cycle_parses_but_has_no_order() {
        let text = "0 input input(name=x,batched=false) inputs=[] shape=[2]\n\
                    1 hidden add inputs=[0;2] shape=[2]\n\
                    2 hidden relu inputs=[1] shape=[2]\n";
        let text = text.replace("add ", "add() ").replace("relu ", "relu() ");
        let g = parse_text(&text).unwrap();
        assert!(matches!(g.topo_order(), Err(Error::Cycle(_))));
    }

    #[test]
    fn unknown_op_is_a_parse_error() {
        let text = "0 hidden frobnicate() inputs=[] shape=[]\n";
        assert!(matches!(parse_text(text), Err(Error::Parse { line: 1, .. })));
    }
}
