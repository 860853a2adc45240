use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BpropRegistry, GradientBundle};
use crate::error::Result;
use crate::graph::{Graph, NodeId, Op, OpKind, Values};
use crate::tensor::{BinaryOp, Padding, ReduceOp, Real, Tensor, UnaryOp};

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub param: NodeId,
    pub name: String,
    pub max_abs_err: Real,
    /// `max|a - n| / max(|n|_inf, |a|_inf, 1e-12)`.
    pub rel_err: Real,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub params: Vec<ParamCheck>,
    /// Set for virtual-gradient bundles, which are not meant to match.
    pub expected_mismatch: bool,
}

impl FdReport {
    pub fn max_rel_err(&self) -> Real {
        self.params.iter().map(|p| p.rel_err).fold(0.0, Real::max)
    }

    pub fn passes(&self, tol: Real) -> bool {
        self.max_rel_err() < tol
    }
}

fn relative_error(analytic: &[Real], numeric: &[Real]) -> (Real, Real) {
    let abs = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, Real::max);
    let scale = numeric
        .iter()
        .chain(analytic)
        .map(|v| v.abs())
        .fold(1e-12, Real::max);
    (abs, abs / scale)
}

fn eval_output(graph: &Graph, bindings: &HashMap<NodeId, Tensor>) -> Result<Real> {
    let out = graph.output().ok_or_else(|| crate::Error::Structure("graph has no output node".into()))?;
    Ok(graph.evaluate(bindings, false)?.value(out)?.item())
}

/// Compares bundle gradients with central differences of the forward graph,
/// element by element, for every parameter.
pub fn finite_difference_check(
    graph: &Graph,
    bundle: &GradientBundle,
    bindings: &HashMap<NodeId, Tensor>,
    step: Real,
) -> Result<FdReport> {
    let mut values = Values::new(&bundle.graph);
    for (&id, t) in bindings {
        values.bind(&bundle.graph, id, t.clone())?;
    }
    let grad_ids = bundle.grad_nodes();
    values.compute(&bundle.graph, &grad_ids, false)?;
    let mut params = Vec::new();
    for (&param, &grad) in &bundle.grads {
        let analytic = values.value(grad)?.data().to_vec();
        let base = bindings[&param].clone();
        let mut numeric = Vec::with_capacity(base.numel());
        // accumulator inputs live only in the extended graph
        let mut local: HashMap<NodeId, Tensor> =
            bindings.iter().filter(|(id, _)| id.0 < graph.len()).map(|(&id, t)| (id, t.clone())).collect();
        for k in 0..base.numel() {
            let mut eval_at = |delta: Real| -> Result<Real> {
                let mut data = base.data().to_vec();
                data[k] += delta;
                local.insert(param, Tensor::from_shape(base.shape().clone(), data)?);
                eval_output(graph, &local)
            };
            let plus = eval_at(step)?;
            let minus = eval_at(-step)?;
            numeric.push((plus - minus) / (2.0 * step));
        }
        let (max_abs_err, rel_err) = relative_error(&analytic, &numeric);
        let name = match &graph.node(param)?.op {
            Op::Parameter { name } => name.clone(),
            _ => param.to_string(),
        };
        params.push(ParamCheck { param, name, max_abs_err, rel_err });
    }
    Ok(FdReport { params, expected_mismatch: bundle.is_virtual })
}

/// Result of checking one backward rule on a small random instance.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: OpKind,
    pub case: String,
    pub rel_err: Real,
}

enum Init {
    Signed,
    Positive,
    /// Rows that sum to one.
    Distribution,
}

struct Case {
    label: &'static str,
    op: Op,
    inputs: Vec<(Vec<usize>, Init)>,
}

fn case(label: &'static str, op: Op, inputs: Vec<(Vec<usize>, Init)>) -> Case {
    Case { label, op, inputs }
}

fn cases() -> Vec<Case> {
    use Init::*;
    let mm = |ta, tb| Op::MatMul { trans_a: ta, trans_b: tb };
    let red = |op, axes: Vec<usize>, keep_dims| Op::Reduce { op, axes, keep_dims };
    vec![
        case("matmul", mm(false, false), vec![(vec![3, 4], Signed), (vec![4, 2], Signed)]),
        case("matmul_ta", mm(true, false), vec![(vec![4, 3], Signed), (vec![4, 2], Signed)]),
        case("matmul_tb", mm(false, true), vec![(vec![3, 4], Signed), (vec![2, 4], Signed)]),
        case("matmul_tab", mm(true, true), vec![(vec![4, 3], Signed), (vec![2, 4], Signed)]),
        case("conv_valid", Op::Conv2d { stride: 1, padding: Padding::Valid }, vec![(vec![2, 5, 4, 2], Signed), (vec![3, 2, 2, 3], Signed)]),
        case("conv_same_s2", Op::Conv2d { stride: 2, padding: Padding::Same }, vec![(vec![1, 5, 6, 2], Signed), (vec![3, 3, 2, 2], Signed)]),
        case("bias_add", Op::BiasAdd, vec![(vec![2, 3, 4], Signed), (vec![4], Signed)]),
        case("scale_channels", Op::ScaleChannels, vec![(vec![2, 3, 4], Signed), (vec![4], Signed)]),
        case("add", Op::Binary(BinaryOp::Add), vec![(vec![2, 3], Signed), (vec![2, 3], Signed)]),
        case("add_scalar", Op::Binary(BinaryOp::Add), vec![(vec![], Signed), (vec![2, 3], Signed)]),
        case("sub", Op::Binary(BinaryOp::Sub), vec![(vec![2, 3], Signed), (vec![2, 3], Signed)]),
        case("sub_scalar", Op::Binary(BinaryOp::Sub), vec![(vec![2, 3], Signed), (vec![], Signed)]),
        case("mul", Op::Binary(BinaryOp::Mul), vec![(vec![2, 3], Signed), (vec![2, 3], Signed)]),
        case("mul_scalar", Op::Binary(BinaryOp::Mul), vec![(vec![], Signed), (vec![2, 3], Signed)]),
        case("add_n", Op::AddN, vec![(vec![3], Signed), (vec![3], Signed), (vec![3], Signed)]),
        case("relu", Op::Unary(UnaryOp::Relu), vec![(vec![2, 5], Signed)]),
        case("sqrt", Op::Unary(UnaryOp::Sqrt), vec![(vec![2, 5], Positive)]),
        case("square", Op::Unary(UnaryOp::Square), vec![(vec![2, 5], Signed)]),
        case("reciprocal", Op::Unary(UnaryOp::Reciprocal), vec![(vec![2, 5], Positive)]),
        case("identity", Op::Identity, vec![(vec![4], Signed)]),
        case("reduce_sum", red(ReduceOp::Sum, vec![0, 2], false), vec![(vec![2, 3, 4], Signed)]),
        case("reduce_mean_keep", red(ReduceOp::Mean, vec![1], true), vec![(vec![2, 3, 4], Signed)]),
        case("broadcast", Op::Broadcast { dims: vec![3, 2, 4], axes: vec![0] }, vec![(vec![2, 4], Signed)]),
        case("reshape", Op::Reshape { dims: vec![4, 3] }, vec![(vec![2, 6], Signed)]),
        case("max_pool2d", Op::MaxPool2d { size: 2, stride: 2 }, vec![(vec![2, 4, 4, 3], Signed)]),
        case("shortcut_pad", Op::ShortcutPad { stride: 2, channels_out: 5 }, vec![(vec![2, 4, 4, 3], Signed)]),
        case("softmax_ce", Op::SoftmaxCrossEntropy, vec![(vec![3, 5], Signed), (vec![3, 5], Distribution)]),
    ]
}

fn sample(rng: &mut ChaCha8Rng, dims: &[usize], init: &Init) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let data: Vec<Real> = match init {
        // keep clear of relu and max-pool kinks
        Init::Signed => (0..n).map(|_| {
            let v: Real = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) { v } else { -v }
        }).collect(),
        Init::Positive => (0..n).map(|_| rng.gen_range(0.5..1.5)).collect(),
        Init::Distribution => {
            let cols = *dims.last().unwrap_or(&1);
            let raw: Vec<Real> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
            raw.chunks(cols).flat_map(|row| {
                let s: Real = row.iter().sum();
                row.iter().map(move |v| v / s)
            }).collect()
        }
    };
    Tensor::new(dims.to_vec(), data)
}

/// Finite-difference check of each backward rule in `registry` on small
/// random instances. Each rule is probed in isolation: its output for a
/// random upstream `w` is compared with central differences of `<op(x), w>`,
/// so a broken rule shows up only under its own op name.
pub fn check_registry(registry: &BpropRegistry, seed: u64, step: Real) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in cases() {
        let mut g = Graph::new();
        let mut bindings = HashMap::new();
        let mut inputs = Vec::new();
        for (k, (dims, init)) in c.inputs.iter().enumerate() {
            let p = g.parameter(format!("x{k}"), dims.clone())?;
            bindings.insert(p, sample(&mut rng, dims, init)?);
            inputs.push(p);
        }
        let y = g.add_node(c.op.clone(), &inputs)?;
        let weights = sample(&mut rng, g.shape(y).dims(), &Init::Signed)?;
        let forward = g.clone();
        let upstream = g.input("upstream", weights.dims().to_vec(), false)?;
        let node = g.node(y)?.clone();
        let rule = registry.get(node.op.kind())?;
        let grads = (0..inputs.len())
            .map(|slot| (rule.backward)(&mut g, &node, slot, upstream))
            .collect::<Result<Vec<_>>>()?;
        let mut values = Values::new(&g);
        for (&id, t) in &bindings {
            values.bind(&g, id, t.clone())?;
        }
        values.bind(&g, upstream, weights.clone())?;
        values.compute(&g, &grads, false)?;
        let mut worst: Real = 0.0;
        for (slot, &p) in inputs.iter().enumerate() {
            let analytic = values.value(grads[slot])?;
            if analytic.shape() != forward.shape(p) {
                worst = Real::INFINITY;
                continue;
            }
            let base = bindings[&p].clone();
            let mut numeric = Vec::with_capacity(base.numel());
            for k in 0..base.numel() {
                let probe = |delta: Real| -> Result<Real> {
                    let mut local = bindings.clone();
                    let mut data = base.data().to_vec();
                    data[k] += delta;
                    local.insert(p, Tensor::from_shape(base.shape().clone(), data)?);
                    let mut v = Values::new(&forward);
                    for (&id, t) in &local {
                        v.bind(&forward, id, t.clone())?;
                    }
                    v.compute(&forward, &[y], false)?;
                    Ok(v.value(y)?.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
                };
                numeric.push((probe(step)? - probe(-step)?) / (2.0 * step));
            }
            worst = worst.max(relative_error(analytic.data(), &numeric).1);
        }
        out.push(OpCheck { op: c.op.kind(), case: c.label.to_string(), rel_err: worst });
    }
    Ok(out)
}
