//! Reverse-mode differentiation over the graph IR.
//!
//! Both passes extend a copy of the forward graph with gradient nodes, so
//! forward ids stay valid and one evaluation yields loss and gradients. The
//! virtual-gradient pass differs from the standard one only in the adjoint it
//! feeds into linear parameter slots of frontier nodes: there the adjoint is
//! replaced by `s * adj / sqrt(r + eps)`, with `r` a bound accumulator input.

mod check;
mod registry;

pub use check::{check_registry, finite_difference_check, FdReport, OpCheck, ParamCheck};
pub use registry::{BackwardFn, BpropRegistry, BpropRule};

use std::collections::BTreeMap;

use log::debug;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Op, Role};
use crate::tensor::{Real, Shape, Tensor};

/// Gradient nodes in an extended copy of a forward graph.
#[derive(Clone, Debug)]
pub struct GradientBundle {
    /// The forward graph plus gradient nodes. Forward ids are unchanged.
    pub graph: Graph,
    /// Parameter id to gradient node.
    pub grads: BTreeMap<NodeId, NodeId>,
    /// Frontier node id to its (unscaled) adjoint node.
    pub hidden_grads: BTreeMap<NodeId, NodeId>,
    /// Frontier node id to its accumulator input. Empty for standard gradients.
    pub accumulators: BTreeMap<NodeId, NodeId>,
    /// Whether linear parameter slots received preconditioned adjoints.
    pub is_virtual: bool,
}

impl GradientBundle {
    pub fn grad(&self, param: NodeId) -> Result<NodeId> {
        self.grads.get(&param).copied().ok_or(Error::UnknownNode(param))
    }

    /// Gradient node ids in parameter order.
    pub fn grad_nodes(&self) -> Vec<NodeId> {
        self.grads.values().copied().collect()
    }
}

/// Where accumulator `r` for one frontier node lives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccumulatorBinding {
    pub frontier: NodeId,
    /// Data input id the accumulator will have in the extended graph.
    pub input: NodeId,
    pub shape: Shape,
    /// True when the frontier value has a batch axis that `r` omits.
    pub batch_reduced: bool,
}

/// Shape convention for accumulators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AccumulatorShape {
    /// Frontier shape without the batch axis, broadcast across it.
    #[default]
    BatchReduced,
    /// Full frontier shape, batch axis included.
    Full,
}

#[derive(Clone, Debug)]
pub struct PreconditionerSpec {
    pub s: Real,
    pub rho: Real,
    pub eps: Real,
    /// Skip the rewrite entirely, so the pass reproduces plain gradients.
    pub identity: bool,
    bindings: Vec<AccumulatorBinding>,
    source_len: usize,
}

pub const DEFAULT_RHO: Real = 0.9;
pub const DEFAULT_EPS: Real = 1e-6;

impl PreconditionerSpec {
    /// One accumulator per frontier node of `graph`, default decay and stabilizer.
    pub fn bind(graph: &Graph, s: Real) -> Result<Self> {
        Self::bind_with(graph, s, DEFAULT_RHO, DEFAULT_EPS, AccumulatorShape::BatchReduced)
    }

    pub fn bind_with(graph: &Graph, s: Real, rho: Real, eps: Real, convention: AccumulatorShape) -> Result<Self> {
        if !(s >= 0.0) || !(0.0..1.0).contains(&rho) || !(eps > 0.0) {
            return Err(Error::Config(format!("need s >= 0, 0 <= rho < 1, eps > 0 (got s={s}, rho={rho}, eps={eps})")));
        }
        let flags = graph.batch_axis_flags()?;
        let bindings = graph
            .frontier()
            .into_iter()
            .enumerate()
            .map(|(k, f)| {
                let full = graph.shape(f.id);
                let batch_reduced = convention == AccumulatorShape::BatchReduced && flags[f.id.0];
                AccumulatorBinding {
                    frontier: f.id,
                    input: NodeId(graph.len() + k),
                    shape: if batch_reduced { full.without_batch() } else { full.clone() },
                    batch_reduced,
                }
            })
            .collect();
        Ok(PreconditionerSpec { s, rho, eps, identity: false, bindings, source_len: graph.len() })
    }

    /// The identity operator: virtual gradients equal ordinary gradients.
    pub fn identity(graph: &Graph) -> Self {
        PreconditionerSpec { s: 1.0, rho: DEFAULT_RHO, eps: DEFAULT_EPS, identity: true, bindings: Vec::new(), source_len: graph.len() }
    }

    pub fn bindings(&self) -> &[AccumulatorBinding] {
        &self.bindings
    }

    /// Drops the binding of one frontier node.
    pub fn unbind(&mut self, frontier: NodeId) {
        self.bindings.retain(|b| b.frontier != frontier);
    }

    /// Total accumulator element count.
    pub fn accumulator_elements(&self) -> usize {
        self.bindings.iter().map(|b| b.shape.numel()).sum()
    }

    fn validate(&self, graph: &Graph) -> Result<()> {
        if graph.len() != self.source_len {
            return Err(Error::FrontierChanged);
        }
        let frontier = graph.frontier();
        for f in &frontier {
            if !self.bindings.iter().any(|b| b.frontier == f.id) {
                return Err(Error::MissingAccumulator(f.id));
            }
        }
        let flags = graph.batch_axis_flags()?;
        for b in &self.bindings {
            let full = graph.shape(b.frontier);
            let expected = if b.batch_reduced { full.without_batch() } else { full.clone() };
            let on_frontier = frontier.iter().any(|f| f.id == b.frontier);
            if !on_frontier || expected != b.shape || (b.batch_reduced && !flags[b.frontier.0]) {
                return Err(Error::FrontierChanged);
            }
        }
        Ok(())
    }
}

/// Which nodes depend on any node of `wrt`.
fn dependence(graph: &Graph, wrt: &[NodeId]) -> Result<Vec<bool>> {
    let mut dep = vec![false; graph.len()];
    for &w in wrt {
        graph.node(w)?;
        dep[w.0] = true;
    }
    for &id in graph.topo_order()? {
        if !dep[id.0] {
            dep[id.0] = graph.nodes()[id.0].inputs.iter().any(|i| dep[i.0]);
        }
    }
    Ok(dep)
}

type Rewrite<'a> = dyn FnMut(&mut Graph, NodeId, NodeId) -> Result<NodeId> + 'a;

/// Core reverse sweep over the forward part of `ext` (ids below `forward_len`).
/// `scale` is consulted for frontier nodes with linear parameter slots and
/// returns the adjoint to feed into those slots.
fn backprop(
    ext: &mut Graph,
    forward_len: usize,
    registry: &BpropRegistry,
    root: NodeId,
    seed: NodeId,
    dep: &[bool],
    mut scale: Option<(&[NodeId], &mut Rewrite<'_>)>,
) -> Result<Vec<Option<NodeId>>> {
    let order: Vec<NodeId> = ext.topo_order()?.iter().copied().filter(|id| id.0 < forward_len).collect();
    let mut parts: Vec<Vec<NodeId>> = vec![Vec::new(); forward_len];
    let mut adjoint: Vec<Option<NodeId>> = vec![None; forward_len];
    parts[root.0].push(seed);
    for &id in order.iter().rev() {
        let contributions = std::mem::take(&mut parts[id.0]);
        let adj = match contributions.len() {
            0 => continue,
            1 => contributions[0],
            _ => ext.add_node(Op::AddN, &contributions)?,
        };
        adjoint[id.0] = Some(adj);
        let node = ext.nodes()[id.0].clone();
        if node.op.is_leaf() {
            continue;
        }
        let rule = *registry.get(node.op.kind())?;
        let mut scaled: Option<NodeId> = None;
        for (slot, &input) in node.inputs.iter().enumerate() {
            if !dep[input.0] {
                continue;
            }
            let mut upstream = adj;
            if let Some((frontier, rewrite)) = scale.as_mut() {
                let is_param = ext.nodes()[input.0].role == Role::LeafParameter;
                if is_param && (rule.linear_in)(slot) && frontier.contains(&id) {
                    upstream = match scaled {
                        Some(s) => s,
                        None => *scaled.insert(rewrite(ext, id, adj)?),
                    };
                }
            }
            let grad = (rule.backward)(ext, &node, slot, upstream)?;
            if ext.shape(grad) != ext.shape(input) {
                return Err(Error::ShapeMismatch {
                    op: node.op.name(),
                    lhs: ext.shape(input).clone(),
                    rhs: ext.shape(grad).clone(),
                });
            }
            parts[input.0].push(grad);
        }
    }
    Ok(adjoint)
}

fn build(graph: &Graph, registry: &BpropRegistry, spec: Option<&PreconditionerSpec>) -> Result<GradientBundle> {
    let root = graph.output().ok_or_else(|| Error::Structure("graph has no output node".into()))?;
    let params = graph.parameters();
    let dep = dependence(graph, &params)?;
    let mut ext = graph.clone();
    let mut accumulators = BTreeMap::new();
    let frontier: Vec<NodeId> = graph.frontier().iter().map(|f| f.id).collect();
    let rewrite_spec = spec.filter(|s| !s.identity);
    if let Some(spec) = rewrite_spec {
        if let Some(issue) = graph.lint().first() {
            return Err(Error::Structure(format!("{issue}; wrap output parameters first")));
        }
        spec.validate(graph)?;
        for b in &spec.bindings {
            let id = ext.input(format!("accumulator_{}", b.frontier), b.shape.dims().to_vec(), false)?;
            debug_assert_eq!(id, b.input);
            accumulators.insert(b.frontier, id);
        }
    }
    let seed = ext.scalar(1.0);
    let adjoint = match rewrite_spec {
        None => backprop(&mut ext, graph.len(), registry, root, seed, &dep, None)?,
        Some(spec) => {
            let (s, eps) = (spec.s, spec.eps);
            let by_frontier: BTreeMap<NodeId, &AccumulatorBinding> = spec.bindings.iter().map(|b| (b.frontier, b)).collect();
            let mut rewrite = |g: &mut Graph, id: NodeId, adj: NodeId| -> Result<NodeId> {
                let b = by_frontier[&id];
                let r = if b.batch_reduced {
                    let dims = g.shape(id).dims().to_vec();
                    g.add_node(Op::Broadcast { dims, axes: vec![0] }, &[b.input])?
                } else {
                    b.input
                };
                let eps = g.scalar(eps);
                let shifted = g.add(r, eps)?;
                let root = g.unary(crate::tensor::UnaryOp::Sqrt, shifted)?;
                let inv = g.unary(crate::tensor::UnaryOp::Reciprocal, root)?;
                let s = g.scalar(s);
                let sa = g.mul(s, adj)?;
                g.mul(sa, inv)
            };
            backprop(&mut ext, graph.len(), registry, root, seed, &dep, Some((&frontier, &mut rewrite)))?
        }
    };
    let mut grads = BTreeMap::new();
    for &p in &params {
        let grad = match adjoint[p.0] {
            Some(a) => a,
            None => registry::zeros(&mut ext, graph.shape(p)),
        };
        grads.insert(p, grad);
    }
    let mut hidden_grads = BTreeMap::new();
    for &f in &frontier {
        let adj = match adjoint[f.0] {
            Some(a) => a,
            None => registry::zeros(&mut ext, graph.shape(f)),
        };
        hidden_grads.insert(f, adj);
    }
    debug!("gradient graph: {} forward nodes, {} total", graph.len(), ext.len());
    Ok(GradientBundle { graph: ext, grads, hidden_grads, accumulators, is_virtual: rewrite_spec.is_some() })
}

/// Standard gradients of the output with respect to every parameter.
pub fn gradients(graph: &Graph) -> Result<GradientBundle> {
    build(graph, &BpropRegistry::standard(), None)
}

pub fn gradients_with(graph: &Graph, registry: &BpropRegistry) -> Result<GradientBundle> {
    build(graph, registry, None)
}

/// Virtual gradients: linear parameter slots of frontier nodes receive the
/// preconditioned adjoint, everything else is standard backpropagation.
pub fn virtual_gradients(graph: &Graph, spec: &PreconditionerSpec) -> Result<GradientBundle> {
    build(graph, &BpropRegistry::standard(), Some(spec))
}

pub fn virtual_gradients_with(graph: &Graph, spec: &PreconditionerSpec, registry: &BpropRegistry) -> Result<GradientBundle> {
    build(graph, registry, Some(spec))
}

/// Vector-Jacobian product graph for an arbitrary node.
#[derive(Clone, Debug)]
pub struct Vjp {
    pub graph: Graph,
    /// Data input holding the cotangent, shaped like the differentiated node.
    pub seed: NodeId,
    /// One node per requested `wrt` entry.
    pub grads: Vec<NodeId>,
}

/// Builds `(d of / d wrt)^T * seed` for each `wrt` node.
pub fn vjp(graph: &Graph, of: NodeId, wrt: &[NodeId]) -> Result<Vjp> {
    let dep = dependence(graph, wrt)?;
    let mut ext = graph.clone();
    let seed = ext.input("vjp_seed", graph.node(of)?.shape.dims().to_vec(), false)?;
    let adjoint = backprop(&mut ext, graph.len(), &BpropRegistry::standard(), of, seed, &dep, None)?;
    let grads = wrt
        .iter()
        .map(|&w| match adjoint[w.0] {
            Some(a) => a,
            None => ext.constant(Tensor::zeros(graph.shape(w))),
        })
        .collect();
    Ok(Vjp { graph: ext, seed, grads })
}
