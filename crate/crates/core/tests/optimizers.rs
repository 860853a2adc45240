use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};

use vgrad::graph::Values;
use vgrad::optim::{step_adam, step_momentum, step_rmsprop, step_sgd, OptimConfig, Optimizer, OptimizerKind, ParamSet, Schedule};
use vgrad::verify::Composite;
use vgrad::Real;

fn config(cases: u32) -> Config {
    Config { cases, rng_seed: RngSeed::Fixed(0xbeef), failure_persistence: None, ..Config::default() }
}

fn vector(n: usize) -> impl Strategy<Value = Vec<Real>> {
    prop::collection::vec(-10.0..10.0 as Real, n)
}

proptest! {
    #![proptest_config(config(128))]

    #[test]
    fn momentum_without_memory_is_sgd(
        (theta, g) in (1usize..16).prop_flat_map(|n| (vector(n), vector(n))),
        lr in 1e-4..1.0 as Real,
    ) {
        let mut a = theta.clone();
        let mut b = theta;
        let mut m = vec![0.0; a.len()];
        step_momentum(&mut a, &g, &mut m, lr, 0.0);
        step_sgd(&mut b, &g, lr);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn adaptive_baselines_hold_still_on_zero_gradients(
        (theta, r0) in (1usize..16).prop_flat_map(|n| (vector(n), prop::collection::vec(0.0..5.0 as Real, n))),
        lr in 1e-4..1.0 as Real,
        t in 1u64..100,
    ) {
        let zero = vec![0.0; theta.len()];
        let mut th = theta.clone();
        let mut r = r0.clone();
        step_rmsprop(&mut th, &zero, &mut r, lr, 0.9, 1e-6);
        prop_assert_eq!(&th, &theta);
        // Adam with a zeroed first moment keeps theta fixed
        let mut s = vec![0.0; theta.len()];
        let mut r = r0;
        step_adam(&mut th, &zero, &mut s, &mut r, t, lr, 0.9, 0.999, 1e-6);
        prop_assert_eq!(&th, &theta);
    }

    #[test]
    fn schedule_picks_the_last_started_segment(
        starts in prop::collection::btree_set(1usize..10_000, 0..5),
        iter in 0usize..12_000,
    ) {
        let mut segments = vec![(0usize, 1.0 as Real)];
        for (k, s) in starts.iter().enumerate() {
            segments.push((*s, 0.5 / (k + 1) as Real));
        }
        let text = segments.iter().map(|(s, lr)| format!("{s}:{lr}")).collect::<Vec<_>>().join(",");
        let sched: Schedule = text.parse().unwrap();
        let expected = segments.iter().rev().find(|(s, _)| *s <= iter).unwrap().1;
        prop_assert_eq!(sched.lr_at(iter), expected);
    }
}

fn objective(c: &Composite, params: &ParamSet) -> Real {
    let mut v = Values::new(&c.graph);
    params.bind(&c.graph, &mut v).unwrap();
    let out = c.graph.output().unwrap();
    v.compute(&c.graph, &[out], false).unwrap();
    v.value(out).unwrap().item()
}

#[test]
fn svgd_mean_objective_never_increases_on_convex_quadratics() {
    const RUNS: u64 = 100;
    const ITERS: usize = 50;
    let mut mean = vec![0.0; ITERS + 1];
    for seed in 0..RUNS {
        let c = Composite::linear(20, 10, seed).unwrap();
        let mut params = ParamSet::new(&c.graph, vec![c.theta0.clone()]).unwrap();
        let mut opt = Optimizer::new(&c.graph, &params, OptimConfig::new(OptimizerKind::Svgd)).unwrap();
        mean[0] += objective(&c, &params);
        for t in 1..=ITERS {
            opt.step(&mut params, &[], 1e-3).unwrap();
            mean[t] += objective(&c, &params);
        }
    }
    for t in 1..=ITERS {
        assert!(mean[t] <= mean[t - 1], "mean objective rose at iteration {t}: {} -> {}", mean[t - 1], mean[t]);
    }
}
