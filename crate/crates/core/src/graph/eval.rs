use std::collections::HashMap;

use super::{Graph, NodeId, Op, Role};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-node value slots for one evaluation of a graph.
///
/// Leaves are bound explicitly; everything else is computed on demand by
/// [`Values::compute`], which only touches nodes that are needed and not yet
/// filled. Values stay valid as long as no binding they depend on changes.
#[derive(Clone, Debug)]
pub struct Values {
    slots: Vec<Option<Tensor>>,
}

impl Values {
    pub fn new(graph: &Graph) -> Self {
        Values { slots: vec![None; graph.len()] }
    }

    /// Binds a parameter or data input. The tensor must match the declared shape.
    pub fn bind(&mut self, graph: &Graph, id: NodeId, value: Tensor) -> Result<()> {
        let node = graph.node(id)?;
        if !matches!(node.role, Role::LeafParameter | Role::DataInput) {
            return Err(Error::Structure(format!("node {id} ({}) cannot be bound", node.role.name())));
        }
        if value.shape() != &node.shape {
            return Err(Error::ShapeMismatch { op: "bind", lhs: node.shape.clone(), rhs: value.shape().clone() });
        }
        self.slots[id.0] = Some(value);
        Ok(())
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    /// Like [`Values::get`], but a missing value is an error.
    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.get(id).ok_or(Error::Unbound { node: id, role: "computed" })
    }

    /// Computes every target and whatever it needs. In checked mode a
    /// non-finite result is reported with the node that produced it.
    pub fn compute(&mut self, graph: &Graph, targets: &[NodeId], checked: bool) -> Result<()> {
        let mut needed = vec![false; graph.len()];
        let mut stack: Vec<NodeId> = targets.to_vec();
        while let Some(id) = stack.pop() {
            let node = graph.node(id)?;
            if needed[id.0] || self.slots[id.0].is_some() {
                continue;
            }
            needed[id.0] = true;
            match node.role {
                Role::LeafParameter | Role::DataInput => {
                    return Err(Error::Unbound { node: id, role: node.role.name() });
                }
                _ => stack.extend(node.inputs.iter().copied()),
            }
        }
        for &id in graph.topo_order()? {
            if !needed[id.0] {
                continue;
            }
            let node = &graph.nodes[id.0];
            let value = match &node.op {
                Op::Constant(t) => t.clone(),
                op => {
                    let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| self.slots[i.0].as_ref().expect("input computed")).collect();
                    op.forward(&inputs, checked).map_err(|e| match e {
                        Error::Domain { op, .. } => Error::NonFinite { op, node: id },
                        other => other,
                    })?
                }
            };
            if checked && !value.all_finite() {
                return Err(Error::NonFinite { op: node.op.name(), node: id });
            }
            self.slots[id.0] = Some(value);
        }
        Ok(())
    }
}

impl Graph {
    /// Binds the given leaves and computes the output node.
    pub fn evaluate(&self, bindings: &HashMap<NodeId, Tensor>, checked: bool) -> Result<Values> {
        let out = self.output.ok_or_else(|| Error::Structure("graph has no output node".into()))?;
        let mut values = Values::new(self);
        for (&id, t) in bindings {
            values.bind(self, id, t.clone())?;
        }
        values.compute(self, &[out], checked)?;
        Ok(values)
    }
}
