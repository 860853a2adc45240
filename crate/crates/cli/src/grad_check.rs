use std::collections::HashMap;

use anyhow::anyhow;
use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vgrad::autodiff::{
    check_registry, finite_difference_check, gradients_with, virtual_gradients_with, AccumulatorShape, BpropRegistry,
    GradientBundle, PreconditionerSpec,
};
use vgrad::graph::{OpKind, Values};
use vgrad::models::{self, Architecture, Model};
use vgrad::{NodeId, Real, Tensor};

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Model architecture: mlp5, vgg6 or resnet20
    #[arg(long, default_value = "mlp5")]
    model: Architecture,
    /// Comma-separated layer widths [default: 16,8,8,8 mlp5; 2,2,2,2,2 vgg6; 2,2,2 resnet20]
    #[arg(long)]
    widths: Option<crate::Widths>,
    /// Minibatch extent
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Seed for parameters, data and the rule probes
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    step: Real,
    /// Largest accepted relative error
    #[arg(long, default_value_t = 1e-6)]
    tol: Real,
    /// Testing aid: deliberately break the backward rule of this op (e.g. mul, matmul)
    #[arg(long, value_name = "OP")]
    corrupt: Option<String>,
}

/// Outcome of every check, kept for tests.
#[derive(Debug, Default)]
pub struct Report {
    pub failing_ops: Vec<OpKind>,
    pub max_param_err: Real,
    pub identity_exact: bool,
    pub unit_scale_exact: bool,
}

impl Report {
    pub fn passes(&self, tol: Real) -> bool {
        self.failing_ops.is_empty() && self.max_param_err < tol && self.identity_exact && self.unit_scale_exact
    }
}

fn tiny_widths(arch: Architecture) -> Vec<usize> {
    match arch {
        Architecture::Mlp5 => vec![16, 8, 8, 8],
        Architecture::Vgg6 => vec![2, 2, 2, 2, 2],
        Architecture::Resnet20 => vec![2, 2, 2],
    }
}

fn random_feed(model: &Model, seed: u64) -> HashMap<NodeId, Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut feed: HashMap<NodeId, Tensor> = model.param_ids().into_iter().zip(model.init(seed)).collect();
    // perturb biases, scales and shifts away from their constant initial values
    for (id, init) in &model.params {
        if !matches!(init, models::Init::FanIn(_)) {
            let shape = model.graph.shape(*id).clone();
            let data = (0..shape.numel()).map(|_| rng.gen_range(-0.5..0.5) + if *init == models::Init::Ones { 1.0 } else { 0.0 }).collect();
            feed.insert(*id, Tensor::from_shape(shape, data).expect("shape"));
        }
    }
    let xs = model.graph.shape(model.input).clone();
    feed.insert(model.input, Tensor::from_shape(xs.clone(), (0..xs.numel()).map(|_| rng.gen::<Real>()).collect()).expect("shape"));
    let (m, k) = (model.batch, models::CLASSES);
    let mut labels = vec![0.0; m * k];
    for row in labels.chunks_mut(k) {
        row[rng.gen_range(0..k)] = 1.0;
    }
    feed.insert(model.labels, Tensor::new(vec![m, k], labels).expect("shape"));
    feed
}

fn evaluate_grads(bundle: &GradientBundle, feed: &HashMap<NodeId, Tensor>) -> anyhow::Result<Vec<Tensor>> {
    let mut v = Values::new(&bundle.graph);
    for (&id, t) in feed {
        v.bind(&bundle.graph, id, t.clone())?;
    }
    let targets = bundle.grad_nodes();
    v.compute(&bundle.graph, &targets, false)?;
    targets.iter().map(|&g| Ok(v.value(g)?.clone())).collect()
}

pub fn check(a: &GradCheckArgs) -> anyhow::Result<Report> {
    let mut registry = BpropRegistry::standard();
    if let Some(name) = &a.corrupt {
        let kind = OpKind::from_name(name).ok_or_else(|| anyhow!("unknown op `{name}`"))?;
        registry.corrupt(kind)?;
    }
    let mut report = Report::default();
    for c in check_registry(&registry, a.seed, a.step)? {
        let ok = c.rel_err < a.tol;
        println!("rule  {:<24} {:<18} rel_err={:.3e} {}", c.op.name(), c.case, c.rel_err, if ok { "ok" } else { "FAIL" });
        if !ok && !report.failing_ops.contains(&c.op) {
            report.failing_ops.push(c.op);
        }
    }

    let widths = a.widths.clone().map(|w| w.0).unwrap_or_else(|| tiny_widths(a.model));
    let model = models::build(a.model, a.batch, Some(&widths))?;
    let g = &model.graph;
    let feed = random_feed(&model, a.seed);
    let standard = gradients_with(g, &registry)?;
    let fd = finite_difference_check(g, &standard, &feed, a.step)?;
    for p in &fd.params {
        println!("param {:<32} rel_err={:.3e}", p.name, p.rel_err);
    }
    report.max_param_err = fd.max_rel_err();

    let reference = evaluate_grads(&standard, &feed)?;
    let identity = virtual_gradients_with(g, &PreconditionerSpec::identity(g), &registry)?;
    report.identity_exact = evaluate_grads(&identity, &feed)?.iter().zip(&reference).all(|(x, y)| x.bits_eq(y));
    println!("identity operator gives standard gradients: {}", if report.identity_exact { "exact" } else { "MISMATCH" });

    // s = 1 and r + eps = 1 exactly, so the scale is one in floating point
    let eps: Real = (2.0 as Real).powi(-20);
    let spec = PreconditionerSpec::bind_with(g, 1.0, 0.9, eps, AccumulatorShape::BatchReduced)?;
    let unit = virtual_gradients_with(g, &spec, &registry)?;
    let mut unit_feed = feed.clone();
    for b in spec.bindings() {
        unit_feed.insert(b.input, Tensor::full(&b.shape, 1.0 - eps));
    }
    report.unit_scale_exact = evaluate_grads(&unit, &unit_feed)?.iter().zip(&reference).all(|(x, y)| x.bits_eq(y));
    println!("unit-scale virtual gradients equal standard ones: {}", if report.unit_scale_exact { "exact" } else { "MISMATCH" });
    Ok(report)
}

pub fn run(a: GradCheckArgs) -> anyhow::Result<u8> {
    let report = check(&a)?;
    for op in &report.failing_ops {
        eprintln!("backward rule for `{}` disagrees with finite differences", op.name());
    }
    let pass = report.passes(a.tol);
    println!("max parameter relative error {:.3e}; {}", report.max_param_err, if pass { "PASS" } else { "FAIL" });
    Ok(if pass { 0 } else { 1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Cli;
    use clap::Parser;

    fn args(extra: &[&str]) -> GradCheckArgs {
        let mut argv = vec!["vgrad", "grad-check"];
        argv.extend_from_slice(extra);
        match Cli::parse_from(argv).command {
            crate::Command::GradCheck(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn tiny_mlp_passes() {
        let a = args(&[]);
        let r = check(&a).unwrap();
        assert!(r.passes(a.tol), "{r:?}");
    }

    #[test]
    fn corrupted_rule_fails_with_its_name() {
        let a = args(&["--corrupt", "mul", "--widths", "4,4,4,4"]);
        let r = check(&a).unwrap();
        assert_eq!(r.failing_ops, vec![OpKind::Mul]);
        assert!(!r.passes(a.tol));
        assert_eq!(run(a).unwrap(), 1);
    }

    #[test]
    fn corrupted_model_op_breaks_the_model_check() {
        let a = args(&["--corrupt", "matmul", "--widths", "4,4,4,4"]);
        let r = check(&a).unwrap();
        assert!(r.failing_ops.contains(&OpKind::MatMul));
        assert!(r.max_param_err > a.tol);
    }
}
