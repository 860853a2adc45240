use log::trace;

use super::{apply_weight_decay, ParamSet};
use crate::autodiff::{virtual_gradients, GradientBundle, PreconditionerSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Values};
use crate::tensor::{Real, Tensor};

/// Scaled virtual gradient descent: one accumulator per frontier node,
/// updated from the squared adjoints before each step.
#[derive(Clone, Debug)]
pub struct Svgd {
    spec: PreconditionerSpec,
    bundle: GradientBundle,
    accumulators: Vec<Tensor>,
    /// Batch extent per binding, or `None` when the frontier value has no batch axis.
    batch: Vec<Option<usize>>,
}

impl Svgd {
    pub fn new(graph: &Graph, spec: PreconditionerSpec) -> Result<Self> {
        let bundle = virtual_gradients(graph, &spec)?;
        let flags = graph.batch_axis_flags()?;
        let batch = spec
            .bindings()
            .iter()
            .map(|b| flags[b.frontier.0].then(|| graph.shape(b.frontier).dims()[0]))
            .collect();
        let accumulators = spec.bindings().iter().map(|b| Tensor::zeros(&b.shape)).collect();
        Ok(Svgd { spec, bundle, accumulators, batch })
    }

    pub fn spec(&self) -> &PreconditionerSpec {
        &self.spec
    }

    pub fn bundle(&self) -> &GradientBundle {
        &self.bundle
    }

    /// Current accumulators, in binding order.
    pub fn accumulators(&self) -> &[Tensor] {
        &self.accumulators
    }

    pub fn set_accumulators(&mut self, accs: Vec<Tensor>) -> Result<()> {
        if accs.len() != self.accumulators.len() || accs.iter().zip(&self.accumulators).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::FrontierChanged);
        }
        self.accumulators = accs;
        Ok(())
    }

    /// Per-example mean of squared adjoints for one frontier value.
    ///
    /// The loss is a batch mean, so the batched adjoint of example `n` is its
    /// per-example adjoint divided by `m`. Averaging `(m * adj_n)^2` over the
    /// batch gives `m * sum_n adj_n^2`.
    fn mean_square(adj: &Tensor, batch: Option<usize>, batch_reduced: bool) -> Vec<Real> {
        let data = adj.data();
        match batch {
            None => data.iter().map(|a| a * a).collect(),
            Some(m) if batch_reduced => {
                let row = data.len() / m;
                let mut out = vec![0.0; row];
                for chunk in data.chunks(row) {
                    for (o, a) in out.iter_mut().zip(chunk) {
                        *o += a * a;
                    }
                }
                let scale = m as Real;
                out.iter_mut().for_each(|o| *o *= scale);
                out
            }
            Some(m) => {
                let scale = (m * m) as Real;
                data.iter().map(|a| scale * a * a).collect()
            }
        }
    }

    /// Accumulate, then update parameters with the fresh accumulators.
    /// Returns the loss before the update.
    pub fn step(&mut self, params: &mut ParamSet, data: &[(NodeId, Tensor)], lr: Real, weight_decay: Real, checked: bool, iter: usize) -> Result<Real> {
        let graph = &self.bundle.graph;
        let out = graph.output().ok_or_else(|| Error::Structure("graph has no output node".into()))?;
        let mut values = Values::new(graph);
        params.bind(graph, &mut values)?;
        for (id, t) in data {
            values.bind(graph, *id, t.clone())?;
        }
        let mut targets = vec![out];
        targets.extend(self.bundle.hidden_grads.values());
        values.compute(graph, &targets, false)?;
        let loss = values.value(out)?.item();
        if checked && !loss.is_finite() {
            return Err(Error::Divergence { iter, detail: format!("loss is {loss}") });
        }

        let rho = self.spec.rho;
        for (k, b) in self.spec.bindings().iter().enumerate() {
            let adj = values.value(self.bundle.hidden_grads[&b.frontier])?;
            let sq = Self::mean_square(adj, self.batch[k], b.batch_reduced);
            let prev = self.accumulators[k].data();
            let next: Vec<Real> = prev.iter().zip(&sq).map(|(r, q)| rho * r + (1.0 - rho) * q).collect();
            if checked && next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { iter, detail: format!("accumulator of node {} became non-finite", b.frontier) });
            }
            self.accumulators[k] = Tensor::from_shape(b.shape.clone(), next)?;
            values.bind(graph, b.input, self.accumulators[k].clone())?;
        }
        trace!("iter {iter}: accumulators updated");

        let grads: Vec<NodeId> = params.ids.iter().map(|id| self.bundle.grads[id]).collect();
        values.compute(graph, &grads, false)?;
        for (k, theta) in params.values.iter_mut().enumerate() {
            let mut g = values.value(grads[k])?.data().to_vec();
            let mut th = theta.data().to_vec();
            apply_weight_decay(&mut g, &th, weight_decay);
            super::step_sgd(&mut th, &g, lr);
            if checked && th.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { iter, detail: format!("parameter {} became non-finite", params.names[k]) });
            }
            *theta = Tensor::from_shape(theta.shape().clone(), th)?;
        }
        Ok(loss)
    }
}
