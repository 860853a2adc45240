//! Optimizers, learning-rate schedules and L1 weight decay.
//!
//! The per-element update rules are plain slice functions; [`Optimizer`]
//! couples one of them (or the graph-based SVGD step) with the gradient
//! graph, the optimizer state and the step counter.

mod checkpoint;
mod schedule;
mod svgd;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use schedule::Schedule;
pub use svgd::Svgd;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{gradients, AccumulatorShape, GradientBundle, PreconditionerSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Values};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    RmsProp,
    Adam,
    Svgd,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 5] =
        [OptimizerKind::Sgd, OptimizerKind::Momentum, OptimizerKind::RmsProp, OptimizerKind::Adam, OptimizerKind::Svgd];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Svgd => "svgd",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown optimizer `{s}`")))
    }
}

/// Hyperparameters for every optimizer; each one reads only its own fields.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    /// Momentum coefficient.
    pub c: Real,
    /// RMSProp decay.
    pub rho: Real,
    /// RMSProp and Adam stabilizer.
    pub delta: Real,
    pub rho1: Real,
    pub rho2: Real,
    /// SVGD scaling coefficient, decay and stabilizer.
    pub s: Real,
    pub svgd_rho: Real,
    pub eps: Real,
    pub accumulator_shape: AccumulatorShape,
    /// L1 weight decay coefficient.
    pub weight_decay: Real,
    /// Fail with a divergence error on any non-finite value.
    pub checked: bool,
}

impl OptimConfig {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimConfig {
            kind,
            c: 0.9,
            rho: 0.9,
            delta: 1e-6,
            rho1: 0.9,
            rho2: 0.999,
            s: 0.1,
            svgd_rho: crate::autodiff::DEFAULT_RHO,
            eps: crate::autodiff::DEFAULT_EPS,
            accumulator_shape: AccumulatorShape::BatchReduced,
            weight_decay: 0.0,
            checked: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: Real| (0.0..1.0).contains(&v);
        let checks = [
            (unit(self.c), "c must lie in [0, 1)"),
            (unit(self.rho), "rho must lie in [0, 1)"),
            (unit(self.rho1) && unit(self.rho2), "rho1 and rho2 must lie in [0, 1)"),
            (self.delta > 0.0, "delta must be positive"),
            (self.s >= 0.0, "s must be non-negative"),
            (unit(self.svgd_rho), "SVGD rho must lie in [0, 1)"),
            (self.eps > 0.0, "eps must be positive"),
            (self.weight_decay >= 0.0, "weight decay must be non-negative"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }
}

pub fn step_sgd(theta: &mut [Real], g: &[Real], lr: Real) {
    for (t, g) in theta.iter_mut().zip(g) {
        *t -= lr * g;
    }
}

pub fn step_momentum(theta: &mut [Real], g: &[Real], m: &mut [Real], lr: Real, c: Real) {
    for ((t, g), m) in theta.iter_mut().zip(g).zip(m) {
        *m = c * *m + g;
        *t -= lr * *m;
    }
}

pub fn step_rmsprop(theta: &mut [Real], g: &[Real], r: &mut [Real], lr: Real, rho: Real, delta: Real) {
    for ((t, g), r) in theta.iter_mut().zip(g).zip(r) {
        *r = rho * *r + (1.0 - rho) * g * g;
        *t -= lr * g / (delta + *r).sqrt();
    }
}

/// Adam with the bias corrections applied as `(s/(1-rho1^t)) / sqrt(delta + r/(1-rho2^t))`.
/// `t` is the 1-based step index.
#[allow(clippy::too_many_arguments)]
pub fn step_adam(theta: &mut [Real], g: &[Real], s: &mut [Real], r: &mut [Real], t: u64, lr: Real, rho1: Real, rho2: Real, delta: Real) {
    debug_assert!(t >= 1);
    let exp = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = 1.0 - rho1.powi(exp);
    let c2 = 1.0 - rho2.powi(exp);
    for (((th, g), s), r) in theta.iter_mut().zip(g).zip(s).zip(r) {
        *s = rho1 * *s + (1.0 - rho1) * g;
        *r = rho2 * *r + (1.0 - rho2) * g * g;
        *th -= lr * (*s / c1) / (delta + *r / c2).sqrt();
    }
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

/// The L1 penalty subgradient `lambda * sign(theta)`, with `sign(0) = 0`.
pub fn weight_decay(theta: &[Real], lambda: Real) -> Vec<Real> {
    theta.iter().map(|&t| lambda * sign(t)).collect()
}

/// Adds the L1 penalty subgradient to `g` in place.
pub fn apply_weight_decay(g: &mut [Real], theta: &[Real], lambda: Real) {
    if lambda == 0.0 {
        return;
    }
    for (g, &t) in g.iter_mut().zip(theta) {
        *g += lambda * sign(t);
    }
}

/// Parameter tensors in the graph's parameter order.
#[derive(Clone, Debug)]
pub struct ParamSet {
    pub ids: Vec<NodeId>,
    pub names: Vec<String>,
    pub values: Vec<Tensor>,
}

impl ParamSet {
    /// Pairs `values` with the graph's parameters, in parameter order.
    pub fn new(graph: &Graph, values: Vec<Tensor>) -> Result<Self> {
        let ids = graph.parameters();
        if ids.len() != values.len() {
            return Err(Error::Structure(format!("graph has {} parameters, got {} tensors", ids.len(), values.len())));
        }
        let mut names = Vec::with_capacity(ids.len());
        for (&id, t) in ids.iter().zip(&values) {
            let node = graph.node(id)?;
            if &node.shape != t.shape() {
                return Err(Error::ShapeMismatch { op: "param_set", lhs: node.shape.clone(), rhs: t.shape().clone() });
            }
            names.push(match &node.op {
                crate::graph::Op::Parameter { name } => name.clone(),
                _ => id.to_string(),
            });
        }
        Ok(ParamSet { ids, names, values })
    }

    pub fn bind(&self, graph: &Graph, values: &mut Values) -> Result<()> {
        for (&id, t) in self.ids.iter().zip(&self.values) {
            values.bind(graph, id, t.clone())?;
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn as_map(&self) -> HashMap<NodeId, Tensor> {
        self.ids.iter().copied().zip(self.values.iter().cloned()).collect()
    }
}

#[derive(Clone, Debug)]
enum State {
    Sgd,
    Momentum { m: Vec<Vec<Real>> },
    RmsProp { r: Vec<Vec<Real>> },
    Adam { s: Vec<Vec<Real>>, r: Vec<Vec<Real>> },
    Svgd(Box<Svgd>),
}

/// An optimizer bound to one objective graph.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimConfig,
    bundle: Option<GradientBundle>,
    state: State,
    step: u64,
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Objective value at the parameters before the update.
    pub loss: Real,
}

fn zeros_like(params: &ParamSet) -> Vec<Vec<Real>> {
    params.values.iter().map(|t| vec![0.0; t.numel()]).collect()
}

impl Optimizer {
    pub fn new(graph: &Graph, params: &ParamSet, config: OptimConfig) -> Result<Self> {
        config.validate()?;
        if params.ids != graph.parameters() {
            return Err(Error::Structure("parameter set does not match the graph's parameters".into()));
        }
        let (bundle, state) = match config.kind {
            OptimizerKind::Svgd => {
                let spec = PreconditionerSpec::bind_with(graph, config.s, config.svgd_rho, config.eps, config.accumulator_shape)?;
                (None, State::Svgd(Box::new(Svgd::new(graph, spec)?)))
            }
            kind => {
                let state = match kind {
                    OptimizerKind::Sgd => State::Sgd,
                    OptimizerKind::Momentum => State::Momentum { m: zeros_like(params) },
                    OptimizerKind::RmsProp => State::RmsProp { r: zeros_like(params) },
                    _ => State::Adam { s: zeros_like(params), r: zeros_like(params) },
                };
                (Some(gradients(graph)?), state)
            }
        };
        Ok(Optimizer { config, bundle, state, step: 0 })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    pub fn kind(&self) -> OptimizerKind {
        self.config.kind
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn svgd(&self) -> Option<&Svgd> {
        match &self.state {
            State::Svgd(s) => Some(s),
            _ => None,
        }
    }

    /// One update on a minibatch. `data` binds every data input of the graph.
    pub fn step(&mut self, params: &mut ParamSet, data: &[(NodeId, Tensor)], lr: Real) -> Result<StepStats> {
        let iter = self.step as usize;
        let cfg = self.config.clone();
        if let State::Svgd(svgd) = &mut self.state {
            let loss = svgd.step(params, data, lr, cfg.weight_decay, cfg.checked, iter)?;
            self.step += 1;
            return Ok(StepStats { loss });
        }
        let bundle = self.bundle.as_ref().expect("baseline optimizers hold a gradient bundle");
        let graph = &bundle.graph;
        let mut values = Values::new(graph);
        params.bind(graph, &mut values)?;
        for (id, t) in data {
            values.bind(graph, *id, t.clone())?;
        }
        let out = graph.output().ok_or_else(|| Error::Structure("graph has no output node".into()))?;
        let mut targets = vec![out];
        targets.extend(bundle.grads.values());
        values.compute(graph, &targets, false)?;
        let loss = values.value(out)?.item();
        if cfg.checked && !loss.is_finite() {
            return Err(Error::Divergence { iter, detail: format!("loss is {loss}") });
        }
        self.step += 1;
        let t = self.step;
        for (k, (id, theta)) in params.ids.iter().zip(params.values.iter_mut()).enumerate() {
            let mut g = values.value(bundle.grads[id])?.data().to_vec();
            let mut th = theta.data().to_vec();
            apply_weight_decay(&mut g, &th, cfg.weight_decay);
            match &mut self.state {
                State::Sgd => step_sgd(&mut th, &g, lr),
                State::Momentum { m } => step_momentum(&mut th, &g, &mut m[k], lr, cfg.c),
                State::RmsProp { r } => step_rmsprop(&mut th, &g, &mut r[k], lr, cfg.rho, cfg.delta),
                State::Adam { s, r } => step_adam(&mut th, &g, &mut s[k], &mut r[k], t, lr, cfg.rho1, cfg.rho2, cfg.delta),
                State::Svgd(_) => unreachable!(),
            }
            if cfg.checked && th.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { iter, detail: format!("parameter {} became non-finite", params.names[k]) });
            }
            *theta = Tensor::from_shape(theta.shape().clone(), th)?;
        }
        Ok(StepStats { loss })
    }

    /// Snapshot of parameters and optimizer state.
    pub fn checkpoint(&self, params: &ParamSet) -> Checkpoint {
        let mut sections = Vec::new();
        for (name, t) in params.names.iter().zip(&params.values) {
            sections.push((format!("param/{name}"), t.clone()));
        }
        let slots = |prefix: &str, buf: &[Vec<Real>], sections: &mut Vec<(String, Tensor)>| {
            for ((name, t), data) in params.names.iter().zip(&params.values).zip(buf) {
                let tensor = Tensor::from_shape(t.shape().clone(), data.clone()).expect("slot matches parameter shape");
                sections.push((format!("{prefix}/{name}"), tensor));
            }
        };
        match &self.state {
            State::Sgd => {}
            State::Momentum { m } => slots("m", m, &mut sections),
            State::RmsProp { r } => slots("r", r, &mut sections),
            State::Adam { s, r } => {
                slots("s", s, &mut sections);
                slots("r", r, &mut sections);
            }
            State::Svgd(svgd) => {
                for (b, acc) in svgd.spec().bindings().iter().zip(svgd.accumulators()) {
                    sections.push((format!("acc/{}", b.frontier), acc.clone()));
                }
            }
        }
        Checkpoint { kind: self.config.kind, step: self.step, sections }
    }

    /// Restores parameters and state written by [`Optimizer::checkpoint`].
    pub fn restore(&mut self, params: &mut ParamSet, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.kind != self.config.kind {
            return Err(Error::Config(format!("checkpoint is for {}, optimizer is {}", ckpt.kind, self.config.kind)));
        }
        let lookup = |key: String, like: &Tensor| -> Result<Tensor> {
            let t = ckpt.get(&key).ok_or_else(|| Error::Config(format!("checkpoint lacks section {key}")))?;
            if t.shape() != like.shape() {
                return Err(Error::ShapeMismatch { op: "restore", lhs: like.shape().clone(), rhs: t.shape().clone() });
            }
            Ok(t.clone())
        };
        let mut restored = Vec::new();
        for (name, t) in params.names.iter().zip(&params.values) {
            restored.push(lookup(format!("param/{name}"), t)?);
        }
        let slot = |prefix: &str| -> Result<Vec<Vec<Real>>> {
            params
                .names
                .iter()
                .zip(&params.values)
                .map(|(n, t)| lookup(format!("{prefix}/{n}"), t).map(Tensor::into_vec))
                .collect()
        };
        match &mut self.state {
            State::Sgd => {}
            State::Momentum { m } => *m = slot("m")?,
            State::RmsProp { r } => *r = slot("r")?,
            State::Adam { s, r } => {
                *s = slot("s")?;
                *r = slot("r")?;
            }
            State::Svgd(svgd) => {
                let accs = svgd
                    .spec()
                    .bindings()
                    .iter()
                    .zip(svgd.accumulators())
                    .map(|(b, like)| lookup(format!("acc/{}", b.frontier), like))
                    .collect::<Result<Vec<_>>>()?;
                svgd.set_accumulators(accs)?;
            }
        }
        params.values = restored;
        self.step = ckpt.step;
        Ok(())
    }
}
