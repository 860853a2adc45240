//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line to stderr (uncaptured) and then asserts the same outcome.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vgrad::autodiff::{
    finite_difference_check, gradients, virtual_gradients, AccumulatorShape, GradientBundle, PreconditionerSpec,
};
use vgrad::data::{find_mnist, load_mnist, Normalizer, Split};
use vgrad::graph::{OpKind, Values};
use vgrad::models::{self, Architecture, Init, Model};
use vgrad::optim::{OptimConfig, Optimizer, OptimizerKind, ParamSet};
use vgrad::train::{self, TrainConfig, METRICS_HEADER};
use vgrad::verify::{
    corollary_positivity, drift_check, lemma1_scatter, random_pairs, theorem_descent, Composite, CompositeObjective, McConfig,
    Sampler, Verdict, DRIFT_ALPHAS, THEOREM_ALPHAS,
};
use vgrad::{NodeId, Real, Tensor};

fn report(criterion: u32, pass: bool, detail: impl AsRef<str>) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {criterion}: {verdict} {}\n", detail.as_ref());
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {criterion} failed: {}", detail.as_ref());
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed < Duration::from_secs(limit_s)
}

fn random(rng: &mut ChaCha8Rng, dims: &[usize], lo: Real, hi: Real) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Initial parameters with biases and affine terms moved off their constants,
/// uniform images and random one-hot labels.
fn feed(model: &Model, seed: u64) -> HashMap<NodeId, Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut feed: HashMap<NodeId, Tensor> = model.param_ids().into_iter().zip(model.init(seed)).collect();
    for (id, init) in &model.params {
        if !matches!(init, Init::FanIn(_)) {
            let base = if *init == Init::Ones { 1.0 } else { 0.0 };
            feed.insert(*id, random(&mut rng, model.graph.shape(*id).dims(), base - 0.5, base + 0.5));
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

fn tiny_widths(arch: Architecture) -> Vec<usize> {
    match arch {
        Architecture::Mlp5 => vec![16, 8, 8, 8],
        Architecture::Vgg6 => vec![2, 2, 2, 2, 2],
        Architecture::Resnet20 => vec![2, 2, 2],
    }
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let start = Instant::now();
    let model = models::build(Architecture::Mlp5, 4, Some(&tiny_widths(Architecture::Mlp5))).unwrap();
    let bundle = gradients(&model.graph).unwrap();
    let fd = finite_difference_check(&model.graph, &bundle, &feed(&model, 0), 1e-5).unwrap();
    let err = fd.max_rel_err();
    let elapsed = start.elapsed();
    report(1, err < 1e-6 && within(elapsed, 10), format!("max relative error {err:.3e} (< 1e-6) in {elapsed:.2?} (< 10 s)"));
}

#[test]
fn criterion_02_identity_operator_equivalence() {
    let start = Instant::now();
    let mut mismatches = Vec::new();
    let mut checked = 0;
    for arch in Architecture::ALL {
        let model = models::build(arch, 2, Some(&tiny_widths(arch))).unwrap();
        let g = &model.graph;
        let standard = gradients(g).unwrap();
        let identity = virtual_gradients(g, &PreconditionerSpec::identity(g)).unwrap();
        for seed in 0..20 {
            let f = feed(&model, seed);
            let a = compute(&standard, &f, &standard.grad_nodes());
            let b = compute(&identity, &f, &identity.grad_nodes());
            checked += 1;
            if !a.iter().zip(&b).all(|(x, y)| x.bits_eq(y)) {
                mismatches.push(format!("{arch}/seed {seed}"));
            }
        }
    }
    let g = models::two_level_composite(3).unwrap();
    let standard = gradients(&g).unwrap();
    let identity = virtual_gradients(&g, &PreconditionerSpec::identity(&g)).unwrap();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: HashMap<NodeId, Tensor> = g.parameters().into_iter().map(|p| (p, random(&mut rng, g.shape(p).dims(), -1.0, 1.0))).collect();
        checked += 1;
        let a = compute(&standard, &f, &standard.grad_nodes());
        let b = compute(&identity, &f, &identity.grad_nodes());
        if !a.iter().zip(&b).all(|(x, y)| x.bits_eq(y)) {
            mismatches.push(format!("composite/seed {seed}"));
        }
    }
    let elapsed = start.elapsed();
    report(
        2,
        mismatches.is_empty() && within(elapsed, 30),
        format!("{} of {checked} model/seed cases bitwise equal in {elapsed:.2?} (< 30 s) {mismatches:?}", checked - mismatches.len()),
    );
}

#[test]
fn criterion_03_lemma_scatter() {
    let start = Instant::now();
    let mc = McConfig { trials: 10_000, m: 20, n: 10, sampler: Sampler::GaussianUnit, seed: 0 };
    let rep = lemma1_scatter(&mc, 200).unwrap();
    let elapsed = start.elapsed();
    let m = mc.m as Real;
    let pass = rep.pearson > 0.99 && ((rep.slope - m) / m).abs() < 0.05 && within(elapsed, 60);
    report(3, pass, format!("pearson {:.5} (> 0.99), slope {:.3} (within 5% of {m}) in {elapsed:.2?} (< 60 s)", rep.pearson, rep.slope));
}

#[test]
fn criterion_04_corollary_positivity() {
    let pairs = random_pairs(10, 100, 0.1, 1);
    let mc = McConfig { trials: 10_000, m: 20, n: 10, sampler: Sampler::GaussianUnit, seed: 2 };
    let rep = corollary_positivity(&mc, &pairs).unwrap();
    let min_dot = pairs.iter().map(|p| p.dot()).fold(Real::INFINITY, Real::min);
    report(
        4,
        rep.positive_fraction >= 0.99 && min_dot >= 0.1,
        format!("{:.1}% of 100 estimates positive (>= 99%), smallest v.u {min_dot:.3}", 100.0 * rep.positive_fraction),
    );
}

#[test]
fn criterion_05_expected_descent() {
    let start = Instant::now();
    let mut smallest = Vec::new();
    for seed in 0..5u64 {
        let obj = CompositeObjective::generate(20, 10, 0.5, Sampler::GaussianUnit, 100 + seed).unwrap();
        let rep = theorem_descent(&obj, &THEOREM_ALPHAS, 1000, 200 + seed).unwrap();
        smallest.push(rep.smallest_passing_alpha);
    }
    let elapsed = start.elapsed();
    let pass = smallest.iter().all(Option::is_some) && within(elapsed, 60);
    report(5, pass, format!("smallest alpha with mean dJ + 3 stderr < 0 per objective {smallest:?} in {elapsed:.2?} (< 60 s)"));
}

#[test]
fn criterion_06_drift_order() {
    let mut ratios = Vec::new();
    for seed in 0..3 {
        let rep = drift_check(&Composite::elementwise_square(10, seed).unwrap(), &DRIFT_ALPHAS).unwrap();
        ratios.extend(rep.rows.iter().filter_map(|r| r.ratio));
    }
    let mut linear_max: Real = 0.0;
    let mut linear_ok = true;
    for seed in 0..3 {
        let rep = drift_check(&Composite::linear(20, 10, seed).unwrap(), &DRIFT_ALPHAS).unwrap();
        linear_max = rep.rows.iter().map(|r| r.drift).fold(linear_max, Real::max);
        linear_ok &= rep.verdict == Verdict::Pass;
    }
    let ratios_ok = ratios.iter().all(|r| (3.0..=5.0).contains(r));
    report(6, ratios_ok && linear_ok, format!("halving ratios {ratios:.3?} (in [3, 5]); linear max drift {linear_max:.2e}"));
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("VGRAD_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data")))
}

type RunCache = Mutex<HashMap<(OptimizerKind, u64), Result<f64, String>>>;
static MNIST_RUNS: std::sync::OnceLock<RunCache> = std::sync::OnceLock::new();

/// Final test error (fraction) of a default-schedule mlp5 run, memoized.
fn mnist_run(kind: OptimizerKind, seed: u64) -> Result<f64, String> {
    let cache = MNIST_RUNS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(r) = guard.get(&(kind, seed)) {
        return r.clone();
    }
    let result = (|| {
        let dir = mnist_dir();
        let [tx, ty, ex, ey] = find_mnist(&dir).ok_or_else(|| format!("MNIST IDX files not found under {} (set VGRAD_DATA_DIR)", dir.display()))?;
        let train_set = load_mnist(&tx, &ty, Split::Train).map_err(|e| e.to_string())?;
        let test_set = load_mnist(&ex, &ey, Split::Test).map_err(|e| e.to_string())?;
        let norm = Normalizer::fit(&train_set).map_err(|e| e.to_string())?;
        let mut cfg = TrainConfig::preset(Architecture::Mlp5, kind);
        cfg.seed = seed;
        let summary = train::run(&cfg, &train_set, &test_set, &norm, &mut std::io::sink()).map_err(|e| e.to_string())?;
        Ok(summary.final_test_err)
    })();
    guard.insert((kind, seed), result.clone());
    result
}

const MNIST_LIMITS: [(OptimizerKind, f64); 4] =
    [(OptimizerKind::Svgd, 0.025), (OptimizerKind::Sgd, 0.030), (OptimizerKind::RmsProp, 0.030), (OptimizerKind::Adam, 0.032)];

#[test]
fn criterion_07_mnist_reproduction() {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for (kind, limit) in MNIST_LIMITS {
        match mnist_run(kind, 0) {
            Ok(err) => {
                pass &= err <= limit;
                parts.push(format!("{kind} {:.2}% (<= {:.1}%)", 100.0 * err, 100.0 * limit));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{kind}: {e}"));
                break;
            }
        }
    }
    report(7, pass, format!("{} in {:.1?}", parts.join(", "), start.elapsed()));
}

#[test]
fn criterion_08_ordering_over_seeds() {
    let mut means = Vec::new();
    for (kind, _) in MNIST_LIMITS {
        let mut sum = 0.0;
        for seed in 0..3 {
            match mnist_run(kind, seed) {
                Ok(err) => sum += err,
                Err(e) => return report(8, false, e),
            }
        }
        means.push((kind, sum / 3.0));
    }
    let svgd = means[0].1;
    let behind: Vec<String> = means[1..].iter().filter(|(_, m)| svgd > m + 0.005).map(|(k, m)| format!("{k} {:.2}%", 100.0 * m)).collect();
    let summary = means.iter().map(|(k, m)| format!("{k} {:.2}%", 100.0 * m)).collect::<Vec<_>>().join(", ");
    report(8, behind.is_empty(), format!("3-seed mean test error {summary}; svgd within 0.5 points of every baseline"));
}

#[test]
fn criterion_09_accumulators_smaller_than_layers() {
    let mut violations = Vec::new();
    let mut checked = 0;
    for arch in [Architecture::Vgg6, Architecture::Resnet20] {
        let model = models::build(arch, 1, None).unwrap();
        for d in model.frontier_dims() {
            if !matches!(d.op, OpKind::Conv2d | OpKind::MatMul) {
                continue;
            }
            checked += 1;
            if !d.holds() {
                violations.push(format!("{arch}/{}: r {} vs {} params", d.param, d.accumulator, d.parameters));
            }
        }
    }
    report(9, violations.is_empty(), format!("{} of {checked} conv/matmul frontier nodes hold; violations {violations:?}", checked - violations.len()));
}

fn sign(x: Real) -> Real {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn row(t: &Tensor, k: usize, m: usize) -> Tensor {
    let len = t.numel() / m;
    let mut dims = t.dims().to_vec();
    dims[0] = 1;
    Tensor::new(dims, t.data()[k * len..(k + 1) * len].to_vec()).unwrap()
}

struct SvgdSettings {
    s: Real,
    rho: Real,
    eps: Real,
    lr: Real,
    decay: Real,
}

/// One step of the per-example algorithm: accumulate the example-mean of
/// squared frontier adjoints, then average per-example virtual gradients.
fn looped_step(one: &Model, params: &mut [Tensor], accs: &mut [Tensor], x: &Tensor, y: &Tensor, set: &SvgdSettings) {
    let g = &one.graph;
    let spec = PreconditionerSpec::bind_with(g, set.s, set.rho, set.eps, AccumulatorShape::BatchReduced).unwrap();
    let bundle = virtual_gradients(g, &spec).unwrap();
    let m = x.dims()[0];
    let ids = g.parameters();
    let base = |k: usize| -> HashMap<NodeId, Tensor> {
        let mut f: HashMap<NodeId, Tensor> = ids.iter().copied().zip(params.iter().cloned()).collect();
        f.insert(one.input, row(x, k, m));
        f.insert(one.labels, row(y, k, m));
        f
    };
    let mut sq: Vec<Vec<Real>> = spec.bindings().iter().map(|b| vec![0.0; b.shape.numel()]).collect();
    for k in 0..m {
        let adj: Vec<NodeId> = spec.bindings().iter().map(|b| bundle.hidden_grads[&b.frontier]).collect();
        for (acc, a) in sq.iter_mut().zip(compute(&bundle, &base(k), &adj)) {
            for (s, v) in acc.iter_mut().zip(a.data()) {
                *s += v * v;
            }
        }
    }
    for (r, s) in accs.iter_mut().zip(&sq) {
        let next = r.data().iter().zip(s).map(|(r, s)| set.rho * r + (1.0 - set.rho) * s / m as Real).collect();
        *r = Tensor::from_shape(r.shape().clone(), next).unwrap();
    }
    let grad_ids: Vec<NodeId> = ids.iter().map(|p| bundle.grads[p]).collect();
    let mut mean: Vec<Vec<Real>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    for k in 0..m {
        let mut f = base(k);
        for (b, r) in spec.bindings().iter().zip(accs.iter()) {
            f.insert(b.input, r.clone());
        }
        for (acc, gk) in mean.iter_mut().zip(compute(&bundle, &f, &grad_ids)) {
            for (a, v) in acc.iter_mut().zip(gk.data()) {
                *a += v / m as Real;
            }
        }
    }
    for (p, g) in params.iter_mut().zip(&mean) {
        let next = p.data().iter().zip(g).map(|(t, g)| t - set.lr * (g + set.decay * sign(*t))).collect();
        *p = Tensor::from_shape(p.shape().clone(), next).unwrap();
    }
}

#[test]
fn criterion_10_batched_matches_per_example_loop() {
    let set = SvgdSettings { s: 0.1, rho: 0.9, eps: 1e-6, lr: 0.05, decay: 1e-4 };
    let mut worst: Real = 0.0;
    let mut cases = 0;
    for arch in [Architecture::Mlp5, Architecture::Resnet20] {
        let widths = match arch {
            Architecture::Mlp5 => vec![6, 5, 4, 3],
            _ => vec![2, 2, 2],
        };
        let one = models::build(arch, 1, Some(&widths)).unwrap();
        for m in 1..=4 {
            let batched = models::build(arch, m, Some(&widths)).unwrap();
            let mut cfg = OptimConfig::new(OptimizerKind::Svgd);
            (cfg.s, cfg.svgd_rho, cfg.eps, cfg.weight_decay) = (set.s, set.rho, set.eps, set.decay);
            let mut params = ParamSet::new(&batched.graph, batched.init(m as u64)).unwrap();
            let mut opt = Optimizer::new(&batched.graph, &params, cfg).unwrap();
            let mut looped_params = params.values.clone();
            let mut looped_accs: Vec<Tensor> = opt.svgd().unwrap().accumulators().to_vec();
            for step in 0..2u64 {
                let f = feed(&batched, 10 * m as u64 + step);
                let (x, y) = (f[&batched.input].clone(), f[&batched.labels].clone());
                opt.step(&mut params, &[(batched.input, x.clone()), (batched.labels, y.clone())], set.lr).unwrap();
                looped_step(&one, &mut looped_params, &mut looped_accs, &x, &y, &set);
            }
            let accs = opt.svgd().unwrap().accumulators();
            let pairs = params.values.iter().zip(&looped_params).chain(accs.iter().zip(&looped_accs));
            for (a, b) in pairs {
                assert_eq!(a.shape(), b.shape());
                worst = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(worst, Real::max);
            }
            cases += 1;
        }
    }
    report(10, worst <= 1e-10, format!("max abs difference {worst:.2e} (<= 1e-10) over {cases} model/batch cases, two steps each"));
}

#[test]
fn criterion_11_long_mode_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_vgrad"))
        .args(["train", "--model", "vgg6", "--long", "--dataset", "synthetic", "--iters", "500", "--batch", "16", "--wall-clock", "zero", "--seed", "0"])
        // the default vgg6 rate of 2.0 diverges at this batch size
        .args(["--schedule", "0:0.2"])
        .arg("--out-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    if !out.status.success() {
        return report(11, false, format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    let header_ok = lines.next() == Some(METRICS_HEADER);
    let mut losses = Vec::new();
    let mut well_formed = header_ok;
    let mut final_err = None;
    for (k, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        well_formed &= cols.len() == 5 && cols[0].parse::<usize>() == Ok(k) && cols[1].parse::<Real>().is_ok() && cols[4].parse::<u64>().is_ok();
        if let Ok(loss) = cols.get(2).copied().unwrap_or("").parse::<Real>() {
            well_formed &= loss.is_finite();
            losses.push(loss);
        }
        if let Ok(err) = cols.get(3).copied().unwrap_or("").parse::<Real>() {
            final_err = Some(err);
        }
    }
    well_formed &= losses.len() == 500 && final_err.is_some_and(|e| (0.0..=1.0).contains(&e));
    for name in ["manifest.txt", "norm_stats.txt", "checkpoint.bin"] {
        well_formed &= dir.path().join(name).is_file();
    }
    let blocks: Vec<Real> = losses.chunks(100).map(|c| c.iter().sum::<Real>() / c.len() as Real).collect();
    let decreasing = blocks.len() == 5 && blocks.windows(2).all(|w| w[1] < w[0]);
    report(
        11,
        well_formed && decreasing,
        format!("metrics well formed: {well_formed}; 100-iteration mean train loss {blocks:.4?}; final test error {final_err:?}"),
    );
}
