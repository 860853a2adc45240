//! Minibatch training loop, per-iteration metrics and run manifests.

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{augment, BatchIterator, Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::graph::Values;
use crate::models::{self, Architecture, Model};
use crate::optim::{Checkpoint, OptimConfig, Optimizer, OptimizerKind, ParamSet, Schedule};
use crate::tensor::{Real, Tensor};

pub const METRICS_HEADER: &str = "iter,lr,train_loss,test_top1_err,wall_ms";

/// Per-architecture experiment defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub batch: usize,
    pub iters: usize,
    pub weight_decay: Real,
    pub s: Real,
    pub eval_every: usize,
    pub augment: bool,
}

pub fn preset(arch: Architecture) -> Preset {
    match arch {
        Architecture::Mlp5 => Preset { batch: 32, iters: 6000, weight_decay: 1e-4, s: 0.1, eval_every: 200, augment: false },
        Architecture::Vgg6 => Preset { batch: 128, iters: 35_000, weight_decay: 1e-5, s: 0.001, eval_every: 1000, augment: true },
        Architecture::Resnet20 => Preset { batch: 128, iters: 50_000, weight_decay: 1e-4, s: 0.01, eval_every: 1000, augment: true },
    }
}

/// Piecewise-constant learning rates used for each architecture and optimizer.
pub fn default_schedule(arch: Architecture, kind: OptimizerKind) -> Schedule {
    let (starts, rates): ([usize; 3], [Real; 3]) = match (arch, kind) {
        (Architecture::Mlp5, OptimizerKind::RmsProp) => ([0, 1600, 3600], [0.001, 0.0005, 0.00005]),
        (Architecture::Mlp5, OptimizerKind::Adam) => ([0, 1600, 3600], [0.001, 0.00005, 0.00005]),
        (Architecture::Mlp5, OptimizerKind::Svgd) => ([0, 1600, 3600], [0.01, 0.005, 0.001]),
        (Architecture::Mlp5, _) => ([0, 1600, 3600], [0.1, 0.05, 0.01]),
        (Architecture::Vgg6, OptimizerKind::RmsProp) => ([0, 12_000, 24_000], [0.02, 0.01, 0.002]),
        (Architecture::Vgg6, OptimizerKind::Adam) => ([0, 12_000, 24_000], [0.02, 0.01, 0.005]),
        (Architecture::Vgg6, _) => ([0, 12_000, 24_000], [2.0, 0.5, 0.005]),
        (Architecture::Resnet20, OptimizerKind::RmsProp) => ([0, 32_000, 42_000], [0.001, 0.0001, 0.0001]),
        (Architecture::Resnet20, OptimizerKind::Adam) => ([0, 32_000, 42_000], [0.001, 0.0001, 0.00005]),
        (Architecture::Resnet20, OptimizerKind::Svgd) => ([0, 32_000, 42_000], [0.5, 0.02, 0.01]),
        (Architecture::Resnet20, _) => ([0, 32_000, 42_000], [0.1, 0.01, 0.001]),
    };
    let base = Schedule::new(starts.into_iter().zip(rates).collect()).expect("static schedule is valid");
    if kind == OptimizerKind::Momentum {
        base.scaled(0.1).expect("positive factor")
    } else {
        base
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WallClock {
    Real,
    /// Writes zero elapsed time so metric files are byte-reproducible.
    Zero,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub widths: Option<Vec<usize>>,
    pub optim: OptimConfig,
    pub schedule: Schedule,
    pub iters: usize,
    pub batch: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub augment: bool,
    pub eval_batch: usize,
    pub wall_clock: WallClock,
}

impl TrainConfig {
    /// Defaults for `arch` trained with `kind`.
    pub fn preset(arch: Architecture, kind: OptimizerKind) -> Self {
        let p = preset(arch);
        let mut optim = OptimConfig::new(kind);
        optim.s = p.s;
        optim.weight_decay = p.weight_decay;
        TrainConfig {
            arch,
            widths: None,
            optim,
            schedule: default_schedule(arch, kind),
            iters: p.iters,
            batch: p.batch,
            seed: 0,
            eval_every: p.eval_every,
            augment: p.augment,
            eval_batch: 500,
            wall_clock: WallClock::Real,
        }
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    /// Test top-1 error after the last update, as a fraction.
    pub final_test_err: f64,
    /// `(iter, loss)` for every update.
    pub train_loss: Vec<(usize, Real)>,
    /// `(iter, error)` for every evaluation.
    pub test_err: Vec<(usize, f64)>,
    pub checkpoint: Checkpoint,
}

/// Forward-only evaluation of a model's logits over a whole dataset.
pub struct Evaluator {
    arch: Architecture,
    widths: Vec<usize>,
    chunk: usize,
    graphs: Vec<Model>,
}

impl Evaluator {
    pub fn new(model: &Model, chunk: usize) -> Self {
        Evaluator { arch: model.arch, widths: model.widths.clone(), chunk: chunk.max(1), graphs: Vec::new() }
    }

    fn model_for(&mut self, batch: usize) -> Result<&Model> {
        if let Some(i) = self.graphs.iter().position(|m| m.batch == batch) {
            return Ok(&self.graphs[i]);
        }
        self.graphs.push(models::build(self.arch, batch, Some(&self.widths))?);
        Ok(self.graphs.last().expect("just pushed"))
    }

    /// Top-1 error of `params` on already-normalized images.
    pub fn top1_error(&mut self, params: &[Tensor], images: &Tensor, labels: &Tensor) -> Result<f64> {
        let n = images.dims()[0];
        if n == 0 {
            return Err(Error::Config("cannot evaluate on an empty test set".into()));
        }
        let img: usize = images.dims()[1..].iter().product();
        let k = labels.dims()[1];
        let mut wrong = 0;
        let mut start = 0;
        while start < n {
            let len = self.chunk.min(n - start);
            let m = self.model_for(len)?;
            let g = &m.graph;
            let mut values = Values::new(g);
            for ((id, _), t) in m.params.iter().zip(params) {
                values.bind(g, *id, t.clone())?;
            }
            let mut dims = vec![len];
            dims.extend_from_slice(&images.dims()[1..]);
            let x = Tensor::new(dims, images.data()[start * img..(start + len) * img].to_vec())?;
            values.bind(g, m.input, x)?;
            values.compute(g, &[m.logits], false)?;
            let y = Tensor::new(vec![len, k], labels.data()[start * k..(start + len) * k].to_vec())?;
            wrong += models::top1_errors(values.value(m.logits)?, &y);
            start += len;
        }
        Ok(wrong as f64 / n as f64)
    }
}

fn fmt_real(v: Real) -> String {
    format!("{v}")
}

/// Trains `cfg.arch` on `train`, evaluating on `test`, and streams one CSV row
/// per iteration to `metrics`. Row `t` carries the rate and minibatch loss of
/// update `t`; evaluation rows carry the test error before update `t`, and a
/// last row `t = iters` holds the final error.
pub fn run(cfg: &TrainConfig, train: &Dataset, test: &Dataset, norm: &Normalizer, metrics: &mut dyn Write) -> Result<RunSummary> {
    if cfg.eval_every == 0 {
        return Err(Error::Config("evaluation interval must be positive".into()));
    }
    let model = models::build(cfg.arch, cfg.batch, cfg.widths.as_deref())?;
    let dims = cfg.arch.input_dims();
    if train.image_dims() != dims || test.image_dims() != dims {
        return Err(Error::Config(format!("{} expects {:?} images, dataset has {:?}", cfg.arch, dims, train.image_dims())));
    }
    info!("{}: {} parameters, optimizer {}", cfg.arch, model.parameter_count(), cfg.optim.kind);
    let mut params = ParamSet::new(&model.graph, model.init(cfg.seed))?;
    let mut opt = Optimizer::new(&model.graph, &params, cfg.optim.clone())?;
    let mut batches = BatchIterator::new(train.len(), cfg.batch, cfg.seed)?;
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(1);
    let test_x = norm.apply(&test.images)?;
    let mut eval = Evaluator::new(&model, cfg.eval_batch);
    let clock = Instant::now();
    let elapsed = || match cfg.wall_clock {
        WallClock::Real => clock.elapsed().as_millis(),
        WallClock::Zero => 0,
    };

    writeln!(metrics, "{METRICS_HEADER}")?;
    let mut summary = RunSummary { final_test_err: f64::NAN, train_loss: Vec::new(), test_err: Vec::new(), checkpoint: opt.checkpoint(&params) };
    for t in 0..=cfg.iters {
        let err = if t == cfg.iters || (t > 0 && t % cfg.eval_every == 0) {
            let err = eval.top1_error(&params.values, &test_x, &test.labels)?;
            summary.test_err.push((t, err));
            Some(err)
        } else {
            None
        };
        let lr = cfg.schedule.lr_at(t);
        let mut row = format!("{t},{}", fmt_real(lr));
        if t < cfg.iters {
            let (x, y) = train.gather(batches.next_batch())?;
            let x = if cfg.augment { augment(&x, &mut aug_rng)? } else { x };
            let x = norm.apply(&x)?;
            let loss = opt.step(&mut params, &[(model.input, x), (model.labels, y)], lr)?.loss;
            summary.train_loss.push((t, loss));
            let _ = write!(row, ",{}", fmt_real(loss));
        } else {
            row.push(',');
        }
        match err {
            Some(e) => {
                let _ = write!(row, ",{e}");
            }
            None => row.push(','),
        }
        let _ = write!(row, ",{}", elapsed());
        writeln!(metrics, "{row}")?;
    }
    summary.final_test_err = summary.test_err.last().map_or(f64::NAN, |e| e.1);
    metrics.flush()?;
    summary.checkpoint = opt.checkpoint(&params);
    Ok(summary)
}

/// Resolved configuration persisted beside a run's outputs.
#[derive(Clone, Debug, Default)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// SHA-256 over the `key=value` lines, independent of insertion order.
    pub fn config_hash(&self) -> String {
        let mut sorted = self.entries.clone();
        sorted.sort();
        let mut h = Sha256::new();
        for (k, v) in &sorted {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Lines sorted by key, followed by the hash and the start time.
    pub fn to_text(&self, started_unix: u64) -> String {
        let mut sorted = self.entries.clone();
        sorted.sort();
        let mut s = String::new();
        for (k, v) in &sorted {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "config_hash={}", self.config_hash());
        let _ = writeln!(s, "started_unix={started_unix}");
        s
    }
}
