use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use log::info;

use vgrad::data::{find_cifar10, find_mnist, load_cifar10, load_mnist, synthetic, Dataset, Normalizer, Split};
use vgrad::models::{Architecture, CLASSES};
use vgrad::optim::{save_checkpoint, OptimizerKind, Schedule};
use vgrad::train::{self, Manifest, TrainConfig, WallClock};
use vgrad::autodiff::AccumulatorShape;
use vgrad::{Error, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    /// MNIST IDX files (default for mlp5)
    Mnist,
    /// CIFAR-10 binary batches (default for vgg6 and resnet20)
    Cifar10,
    /// Generated class-prototype images shaped like the model's input
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ClockArg {
    Real,
    /// Record zero elapsed time so metrics.csv is byte-reproducible
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AccumulatorArg {
    /// One accumulator entry per feature, averaged over the minibatch
    Batch,
    /// One accumulator entry per minibatch element and feature
    Full,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Model architecture: mlp5, vgg6 or resnet20
    #[arg(long, default_value = "mlp5")]
    model: Architecture,
    /// Optimizer: sgd, momentum, rmsprop, adam or svgd
    #[arg(long = "opt", default_value = "svgd")]
    opt: OptimizerKind,
    /// SVGD scaling coefficient [default: 0.1 mlp5, 0.001 vgg6, 0.01 resnet20]
    #[arg(long)]
    s: Option<Real>,
    /// Decay of the RMSProp and SVGD squared-gradient averages
    #[arg(long, default_value_t = 0.9)]
    rho: Real,
    /// SVGD stabilizer added under the square root
    #[arg(long, default_value_t = 1e-6)]
    eps: Real,
    /// Momentum coefficient
    #[arg(long, default_value_t = 0.9)]
    c: Real,
    /// RMSProp and Adam stabilizer
    #[arg(long, default_value_t = 1e-6)]
    delta: Real,
    /// Adam first-moment decay
    #[arg(long, default_value_t = 0.9)]
    rho1: Real,
    /// Adam second-moment decay
    #[arg(long, default_value_t = 0.999)]
    rho2: Real,
    /// Learning rates as start:lr[,start:lr...] [default: the model and optimizer's reference schedule]
    #[arg(long)]
    schedule: Option<Schedule>,
    /// Number of updates [default: 6000 mlp5, 35000 vgg6, 50000 resnet20]
    #[arg(long)]
    iters: Option<usize>,
    /// Minibatch size [default: 32 mlp5, 128 otherwise]
    #[arg(long)]
    batch: Option<usize>,
    /// L1 weight decay [default: 1e-4 mlp5 and resnet20, 1e-5 vgg6]
    #[arg(long)]
    wd: Option<Real>,
    /// Dataset [default: mnist for mlp5, cifar10 otherwise]
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    /// Directory holding the dataset files
    #[arg(long, env = "VGRAD_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    /// Seed for initialization, shuffling and augmentation
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for metrics.csv, manifest.txt, norm_stats.txt and checkpoint.bin
    #[arg(long, default_value = "runs/latest")]
    out_dir: PathBuf,
    /// Allow the long CIFAR-10 runs (vgg6, resnet20)
    #[arg(long)]
    long: bool,
    /// Stop with an error at the first non-finite value
    #[arg(long)]
    checked: bool,
    /// Test-set evaluation interval in updates [default: 200 mlp5, 1000 otherwise]
    #[arg(long)]
    eval_every: Option<usize>,
    /// Evaluate on at most this many test examples [default: all]
    #[arg(long)]
    test_limit: Option<usize>,
    /// Comma-separated layer widths [default: 256,128,64,32 mlp5; 16,16,32,32,64 vgg6; 16,32,64 resnet20]
    #[arg(long)]
    widths: Option<crate::Widths>,
    /// Wall-clock column source
    #[arg(long, value_enum, default_value = "real")]
    wall_clock: ClockArg,
    /// SVGD accumulator layout
    #[arg(long, value_enum, default_value = "batch")]
    accumulator: AccumulatorArg,
    /// Training-set size when --dataset synthetic
    #[arg(long, default_value_t = 4096)]
    synthetic_size: usize,
}

fn load(kind: DatasetKind, arch: Architecture, dir: &Path, seed: u64, synthetic_size: usize) -> anyhow::Result<(Dataset, Dataset)> {
    match kind {
        DatasetKind::Mnist => {
            let [tx, ty, ex, ey] = find_mnist(dir)
                .with_context(|| format!("MNIST IDX files not found in {} (set --data-dir or VGRAD_DATA_DIR)", dir.display()))?;
            Ok((load_mnist(&tx, &ty, Split::Train)?, load_mnist(&ex, &ey, Split::Test)?))
        }
        DatasetKind::Cifar10 => {
            let (train, test) = find_cifar10(dir)
                .with_context(|| format!("CIFAR-10 binary batches not found in {} (set --data-dir or VGRAD_DATA_DIR)", dir.display()))?;
            Ok((load_cifar10(&train, Split::Train)?, load_cifar10(&[test], Split::Test)?))
        }
        DatasetKind::Synthetic => {
            let dims = arch.input_dims();
            let test_size = (synthetic_size / 4).max(1);
            Ok((synthetic(synthetic_size, dims, CLASSES, seed, Split::Train)?, synthetic(test_size, dims, CLASSES, seed, Split::Test)?))
        }
    }
}

fn config(a: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::preset(a.model, a.opt);
    let o = &mut cfg.optim;
    o.rho = a.rho;
    o.svgd_rho = a.rho;
    o.eps = a.eps;
    o.c = a.c;
    o.delta = a.delta;
    o.rho1 = a.rho1;
    o.rho2 = a.rho2;
    o.checked = a.checked;
    o.accumulator_shape = match a.accumulator {
        AccumulatorArg::Batch => AccumulatorShape::BatchReduced,
        AccumulatorArg::Full => AccumulatorShape::Full,
    };
    if let Some(s) = a.s {
        o.s = s;
    }
    if let Some(wd) = a.wd {
        o.weight_decay = wd;
    }
    o.validate()?;
    if let Some(s) = &a.schedule {
        cfg.schedule = s.clone();
    }
    if let Some(i) = a.iters {
        cfg.iters = i;
    }
    if let Some(b) = a.batch {
        cfg.batch = b;
    }
    if let Some(e) = a.eval_every {
        cfg.eval_every = e;
    }
    cfg.widths = a.widths.clone().map(|w| w.0);
    cfg.seed = a.seed;
    cfg.wall_clock = match a.wall_clock {
        ClockArg::Real => WallClock::Real,
        ClockArg::Zero => WallClock::Zero,
    };
    Ok(cfg)
}

fn manifest(a: &TrainArgs, cfg: &TrainConfig, dataset: DatasetKind) -> Manifest {
    let mut m = Manifest::new();
    let o = &cfg.optim;
    m.set("model", cfg.arch);
    m.set("widths", cfg.widths.clone().unwrap_or_else(|| cfg.arch.default_widths()).iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","));
    m.set("opt", o.kind);
    m.set("s", o.s);
    m.set("rho", a.rho);
    m.set("eps", o.eps);
    m.set("c", o.c);
    m.set("delta", o.delta);
    m.set("rho1", o.rho1);
    m.set("rho2", o.rho2);
    m.set("schedule", &cfg.schedule);
    m.set("iters", cfg.iters);
    m.set("batch", cfg.batch);
    m.set("wd", o.weight_decay);
    m.set("dataset", format!("{dataset:?}").to_lowercase());
    m.set("data_dir", a.data_dir.display());
    m.set("seed", cfg.seed);
    m.set("out_dir", a.out_dir.display());
    m.set("long", a.long);
    m.set("checked", o.checked);
    m.set("eval_every", cfg.eval_every);
    m.set("test_limit", a.test_limit.map_or("all".to_string(), |n| n.to_string()));
    m.set("wall_clock", format!("{:?}", a.wall_clock).to_lowercase());
    m.set("accumulator", format!("{:?}", a.accumulator).to_lowercase());
    m.set("augment", cfg.augment);
    if dataset == DatasetKind::Synthetic {
        m.set("synthetic_size", a.synthetic_size);
    }
    m
}

pub fn run(a: TrainArgs) -> anyhow::Result<u8> {
    let cfg = config(&a)?;
    let dataset = a.dataset.unwrap_or(match a.model {
        Architecture::Mlp5 => DatasetKind::Mnist,
        _ => DatasetKind::Cifar10,
    });
    if a.model != Architecture::Mlp5 && !a.long {
        bail!("{} trains on CIFAR-sized inputs for tens of thousands of updates; pass --long to run it", a.model);
    }
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let man = manifest(&a, &cfg, dataset);
    fs::write(a.out_dir.join("manifest.txt"), man.to_text(started))?;

    let (train_set, mut test_set) = load(dataset, a.model, &a.data_dir, a.seed, a.synthetic_size)?;
    if let Some(n) = a.test_limit {
        test_set = test_set.truncated(n)?;
    }
    info!("{} training and {} test examples", train_set.len(), test_set.len());
    let norm = Normalizer::fit(&train_set)?;
    norm.save(&a.out_dir.join("norm_stats.txt"))?;

    let metrics_path = a.out_dir.join("metrics.csv");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let summary = match train::run(&cfg, &train_set, &test_set, &norm, &mut metrics) {
        Ok(s) => s,
        Err(e @ Error::Divergence { .. }) => {
            eprintln!("error: {e}");
            return Ok(3);
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&a.out_dir.join("checkpoint.bin"), &summary.checkpoint)?;
    println!("final test top-1 error: {:.2}%", 100.0 * summary.final_test_err);
    Ok(0)
}
