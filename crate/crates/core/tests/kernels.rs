use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};

use vgrad::autodiff::{check_registry, BpropRegistry};
use vgrad::tensor::{conv2d, matmul, Padding};
use vgrad::{Real, Tensor};

/// Central-difference tolerance for the active real width.
const FD_TOL: Real = if std::mem::size_of::<Real>() == 8 { 1e-6 } else { 1e-3 };
const CONV_TOL: Real = if std::mem::size_of::<Real>() == 8 { 1e-12 } else { 1e-5 };

fn config(cases: u32) -> Config {
    Config { cases, rng_seed: RngSeed::Fixed(0x5eed), failure_persistence: None, ..Config::default() }
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1e3..1e3 as Real, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn eye(n: usize) -> Tensor {
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        d[i * n + i] = 1.0;
    }
    Tensor::new(vec![n, n], d).unwrap()
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..7, 1usize..7, 1usize..7)
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn identity_factor_leaves_products_unchanged(
        (a, b) in dims().prop_flat_map(|(m, k, n)| (matrix(m, k), matrix(k, n)))
    ) {
        let k = a.dims()[1];
        let ai = matmul(&a, &eye(k), false, false).unwrap();
        prop_assert_eq!(ai.data(), a.data());
        let lhs = matmul(&ai, &b, false, false).unwrap();
        let rhs = matmul(&a, &b, false, false).unwrap();
        prop_assert_eq!(lhs.data(), rhs.data());
    }

    #[test]
    fn pointwise_conv_is_a_matmul_over_positions(
        n in 1usize..3, h in 1usize..5, w in 1usize..5, c in 1usize..4, co in 1usize..4,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Real> = (0..n * h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<Real> = (0..c * co).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![n, h, w, c], x).unwrap();
        let k = Tensor::new(vec![1, 1, c, co], k).unwrap();
        let conv = conv2d(&x, &k, 1, Padding::Valid).unwrap();
        let flat = matmul(&x.reshape(vec![n * h * w, c]).unwrap(), &k.reshape(vec![c, co]).unwrap(), false, false).unwrap();
        prop_assert_eq!(conv.dims(), &[n, h, w, co][..]);
        let diff = conv.data().iter().zip(flat.data()).map(|(a, b)| (a - b).abs()).fold(0.0, Real::max);
        prop_assert!(diff < CONV_TOL, "max abs diff {diff}");
    }
}

proptest! {
    #![proptest_config(config(8))]

    #[test]
    fn backward_rules_match_central_differences(seed in any::<u64>()) {
        for check in check_registry(&BpropRegistry::standard(), seed, 1e-5).unwrap() {
            prop_assert!(check.rel_err < FD_TOL, "{} ({}): {}", check.case, check.op, check.rel_err);
        }
    }
}
