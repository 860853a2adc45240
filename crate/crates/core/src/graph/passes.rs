use super::{Graph, NodeId, Op, Role};
use crate::error::{Error, Result};

/// Inserts an identity node between the output op and every parameter it
/// consumes directly, so each parameter reaches the output through a hidden
/// node. Returns the new graph and the old-to-new id mapping.
pub fn wrap_output_parameters(graph: &Graph) -> Result<(Graph, Vec<NodeId>)> {
    let out = graph.output.ok_or_else(|| Error::Structure("graph has no output node".into()))?;
    let mut fresh = Graph::new();
    let mut map = Vec::with_capacity(graph.len());
    for node in &graph.nodes {
        let id = if node.op.is_leaf() {
            fresh.push(node.op.clone(), Vec::new(), node.shape.clone(), node.role)
        } else {
            let mut inputs: Vec<NodeId> = node.inputs.iter().map(|i| map[i.0]).collect();
            if node.id == out {
                for (slot, old) in node.inputs.iter().enumerate() {
                    if graph.nodes[old.0].role == Role::LeafParameter {
                        inputs[slot] = fresh.add_node(Op::Identity, &[inputs[slot]])?;
                    }
                }
            }
            fresh.add_node(node.op.clone(), &inputs)?
        };
        map.push(id);
    }
    fresh.set_output(map[out.0])?;
    Ok((fresh, map))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_graph_is_copied_verbatim() {
        let mut g = Graph::new();
        let t = g.parameter("t", vec![2]).unwrap();
        let s = g.square(t).unwrap();
        let j = g.sum_all(s).unwrap();
        g.set_output(j).unwrap();
        let (h, map) = wrap_output_parameters(&g).unwrap();
        assert_eq!(h.len(), g.len());
        assert_eq!(map, vec![t, s, j]);
    }

    #[test]
    fn identity_is_inserted_per_parameter_slot() {
        let mut g = Graph::new();
        let a = g.parameter("a", vec![2, 2]).unwrap();
        let x = g.input("x", vec![2, 2], false).unwrap();
        let j = g.softmax_cross_entropy(a, x).unwrap();
        g.set_output(j).unwrap();
        let (h, map) = wrap_output_parameters(&g).unwrap();
        assert_eq!(h.len(), 4);
        let out = h.node(map[j.0]).unwrap();
        assert_eq!(h.node(out.inputs[0]).unwrap().op, Op::Identity);
        assert_eq!(out.inputs[1], map[x.0]);
    }
}
