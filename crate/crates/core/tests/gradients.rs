use std::collections::HashMap;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vgrad::autodiff::{gradients, virtual_gradients, AccumulatorShape, GradientBundle, PreconditionerSpec};
use vgrad::graph::Values;
use vgrad::models::{self, Architecture, Init, Model};
use vgrad::{Graph, NodeId, Real, Tensor};

fn config(cases: u32) -> Config {
    Config { cases, rng_seed: RngSeed::Fixed(0xfeed), failure_persistence: None, ..Config::default() }
}

fn tiny(arch: Architecture, batch: usize) -> Model {
    let widths: &[usize] = match arch {
        Architecture::Mlp5 => &[6, 5, 4, 3],
        Architecture::Vgg6 => &[2, 2, 2, 2, 2],
        Architecture::Resnet20 => &[2, 2, 2],
    };
    models::build(arch, batch, Some(widths)).unwrap()
}

fn random(rng: &mut ChaCha8Rng, dims: &[usize], lo: Real, hi: Real) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn feed(model: &Model, seed: u64) -> HashMap<NodeId, Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feed: HashMap<NodeId, Tensor> = model.param_ids().into_iter().zip(model.init(seed)).collect();
    for (id, init) in &model.params {
        if !matches!(init, Init::FanIn(_)) {
            let base = if *init == Init::Ones { 1.0 } else { 0.0 };
            let t = random(&mut rng, model.graph.shape(*id).dims(), base - 0.5, base + 0.5);
            feed.insert(*id, t);
        }
    }
    feed.insert(model.input, random(&mut rng, model.graph.shape(model.input).dims(), 0.0, 1.0));
    let mut labels = vec![0.0; model.batch * models::CLASSES];
    for row in labels.chunks_mut(models::CLASSES) {
        row[rng.gen_range(0..models::CLASSES)] = 1.0;
    }
    feed.insert(model.labels, Tensor::new(vec![model.batch, models::CLASSES], labels).unwrap());
    feed
}

fn compute(bundle: &GradientBundle, feed: &HashMap<NodeId, Tensor>, targets: &[NodeId]) -> Vec<Tensor> {
    let mut v = Values::new(&bundle.graph);
    for (&id, t) in feed {
        v.bind(&bundle.graph, id, t.clone()).unwrap();
    }
    v.compute(&bundle.graph, targets, false).unwrap();
    targets.iter().map(|&t| v.value(t).unwrap().clone()).collect()
}

fn arch() -> impl Strategy<Value = Architecture> {
    prop::sample::select(Architecture::ALL.to_vec())
}

proptest! {
    #![proptest_config(config(12))]

    #[test]
    fn evaluation_is_referentially_transparent(arch in arch(), seed in any::<u64>()) {
        let model = tiny(arch, 2);
        let bindings = feed(&model, seed);
        let a = model.graph.evaluate(&bindings, false).unwrap();
        let b = model.graph.evaluate(&bindings, false).unwrap();
        for id in [model.logits, model.loss] {
            prop_assert!(a.value(id).unwrap().bits_eq(b.value(id).unwrap()));
        }
    }

    #[test]
    fn initialization_depends_only_on_the_seed(arch in arch(), seed in any::<u64>()) {
        let model = tiny(arch, 1);
        let (a, b) = (model.init(seed), model.init(seed));
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.bits_eq(y)));
    }

    #[test]
    fn identity_operator_reproduces_gradients(arch in arch(), seed in any::<u64>()) {
        let model = tiny(arch, 2);
        let g = &model.graph;
        let standard = gradients(g).unwrap();
        let identity = virtual_gradients(g, &PreconditionerSpec::identity(g)).unwrap();
        let bindings = feed(&model, seed);
        let a = compute(&standard, &bindings, &standard.grad_nodes());
        let b = compute(&identity, &bindings, &identity.grad_nodes());
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.bits_eq(y)));
    }

    #[test]
    fn scaling_touches_only_parameter_adjoints(arch in arch(), seed in any::<u64>(), s in 0.05..3.0 as Real) {
        let model = tiny(arch, 2);
        let g = &model.graph;
        let standard = gradients(g).unwrap();
        let spec = PreconditionerSpec::bind_with(g, s, 0.9, 1e-6, AccumulatorShape::BatchReduced).unwrap();
        let scaled = virtual_gradients(g, &spec).unwrap();
        let mut bindings = feed(&model, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xacc);
        for b in spec.bindings() {
            bindings.insert(b.input, random(&mut rng, b.shape.dims(), 0.1, 2.0));
        }
        // forward values and frontier adjoints are shared by both graphs
        let shared: Vec<NodeId> = (0..g.len()).map(NodeId).chain(standard.hidden_grads.values().copied()).collect();
        let shared_scaled: Vec<NodeId> = (0..g.len()).map(NodeId).chain(scaled.hidden_grads.values().copied()).collect();
        let plain_feed: HashMap<NodeId, Tensor> = bindings.iter().filter(|(id, _)| id.0 < g.len()).map(|(&k, v)| (k, v.clone())).collect();
        let a = compute(&standard, &plain_feed, &shared);
        let b = compute(&scaled, &bindings, &shared_scaled);
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.bits_eq(y)));
        // every parameter sits in a linear slot, so every parameter gradient moves
        let ga = compute(&standard, &plain_feed, &standard.grad_nodes());
        let gb = compute(&scaled, &bindings, &scaled.grad_nodes());
        for (x, y) in ga.iter().zip(&gb) {
            prop_assert_eq!(x.shape(), y.shape());
            if x.max_abs() > 0.0 {
                prop_assert!(!x.bits_eq(y));
            }
        }
    }
}

#[test]
fn rewired_edges_keep_their_shapes() {
    for arch in Architecture::ALL {
        let model = tiny(arch, 3);
        let g = &model.graph;
        let spec = PreconditionerSpec::bind(g, 0.1).unwrap();
        let bundle = virtual_gradients(g, &spec).unwrap();
        for (&param, &grad) in &bundle.grads {
            assert_eq!(bundle.graph.shape(grad), g.shape(param));
        }
        for (&frontier, &adj) in &bundle.hidden_grads {
            assert_eq!(bundle.graph.shape(adj), g.shape(frontier));
        }
        for b in spec.bindings() {
            assert_eq!(b.shape, g.shape(b.frontier).without_batch());
        }
    }
}

#[test]
fn builders_pass_the_lint() {
    for arch in Architecture::ALL {
        let model = tiny(arch, 2);
        assert!(model.graph.lint().is_empty(), "{arch}");
        assert!(models::parameters_at_frontier(&model.graph), "{arch}");
        assert_eq!(model.graph.shape(model.loss).numel(), 1);
    }
    assert!(models::parameters_at_frontier(&models::two_level_composite(3).unwrap()));
}

#[test]
fn identity_operator_on_the_two_level_composite() {
    let g: Graph = models::two_level_composite(4).unwrap();
    let standard = gradients(&g).unwrap();
    let identity = virtual_gradients(&g, &PreconditionerSpec::identity(&g)).unwrap();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bindings: HashMap<NodeId, Tensor> = g
            .parameters()
            .into_iter()
            .chain(g.data_inputs())
            .map(|id| (id, random(&mut rng, g.shape(id).dims(), -1.0, 1.0)))
            .collect();
        let a = compute(&standard, &bindings, &standard.grad_nodes());
        let b = compute(&identity, &bindings, &identity.grad_nodes());
        assert!(a.iter().zip(&b).all(|(x, y)| x.bits_eq(y)), "seed {seed}");
    }
}
