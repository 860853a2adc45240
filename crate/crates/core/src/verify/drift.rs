use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;

use super::{stream_rng, Sampler, Verdict};
use crate::autodiff::vjp;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Values};
use crate::tensor::{Real, Tensor};

/// A graph `J = F(f(theta))` with the inner value `sigma = f(theta)` marked,
/// an expansion point and a positive diagonal operator on sigma-space.
#[derive(Clone, Debug)]
pub struct Composite {
    pub graph: Graph,
    pub theta: NodeId,
    pub sigma: NodeId,
    pub theta0: Tensor,
    pub t_diag: Vec<Real>,
    /// Whether `f` is affine, in which case the drift must vanish.
    pub linear: bool,
}

/// Appends `J = 0.5 * sum(d * (sigma - c)^2)` and marks it as the output.
fn quadratic_head(g: &mut Graph, sigma: NodeId, c: Tensor, d: Tensor) -> Result<()> {
    let c = g.constant(c);
    let d = g.constant(d);
    let diff = g.sub(sigma, c)?;
    let sq = g.square(diff)?;
    let w = g.mul(sq, d)?;
    let s = g.sum_all(w)?;
    let half = g.scalar(0.5);
    let j = g.mul(s, half)?;
    g.set_output(j)
}

fn gaussian(rng: &mut rand_chacha::ChaCha8Rng, dims: &[usize]) -> Result<Tensor> {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| Sampler::GaussianUnit.sample(rng)).collect())
}

fn positive(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<Real> {
    (0..n).map(|_| rng.gen_range(0.5..1.5)).collect()
}

impl Composite {
    /// `f(theta) = theta * theta` elementwise.
    pub fn elementwise_square(n: usize, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, 0);
        let mut g = Graph::new();
        let theta = g.parameter("theta", vec![n])?;
        let sigma = g.square(theta)?;
        let c = gaussian(&mut rng, &[n])?;
        let d = Tensor::new(vec![n], positive(&mut rng, n))?;
        quadratic_head(&mut g, sigma, c, d)?;
        let theta0 = gaussian(&mut rng, &[n])?;
        Ok(Composite { graph: g, theta, sigma, theta0, t_diag: positive(&mut rng, n), linear: false })
    }

    /// `f(theta) = A theta + b` with Gaussian `A` of shape `m x n`.
    pub fn linear(m: usize, n: usize, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, 0);
        let mut g = Graph::new();
        let theta = g.parameter("theta", vec![n, 1])?;
        let a = g.constant(gaussian(&mut rng, &[m, n])?);
        let b = g.constant(gaussian(&mut rng, &[m, 1])?);
        let at = g.matmul(a, theta)?;
        let sigma = g.add(at, b)?;
        let c = gaussian(&mut rng, &[m, 1])?;
        let d = Tensor::new(vec![m, 1], positive(&mut rng, m))?;
        quadratic_head(&mut g, sigma, c, d)?;
        let theta0 = gaussian(&mut rng, &[n, 1])?;
        Ok(Composite { graph: g, theta, sigma, theta0, t_diag: positive(&mut rng, m), linear: true })
    }

    fn sigma_at(&self, theta: &Tensor) -> Result<Tensor> {
        let mut v = Values::new(&self.graph);
        v.bind(&self.graph, self.theta, theta.clone())?;
        v.compute(&self.graph, &[self.sigma], false)?;
        Ok(v.value(self.sigma)?.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftRow {
    pub alpha: Real,
    pub drift: Real,
    /// Drift at the previous (doubled) step size over this one.
    pub ratio: Option<Real>,
}

#[derive(Clone, Debug)]
pub struct DriftReport {
    pub rows: Vec<DriftRow>,
    pub verdict: Verdict,
}

impl DriftReport {
    pub fn to_csv(&self) -> String {
        format!("alpha,drift,ratio\n{}", self.to_csv_rows())
    }

    pub fn to_csv_rows(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let ratio = r.ratio.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", r.alpha, r.drift, ratio);
        }
        out
    }
}

/// Takes one paired step from `theta0`: in sigma-space
/// `sigma <- sigma - alpha M M^T T grad F`, in theta-space
/// `theta <- theta - alpha M^T T grad F`, and reports `|sigma' - f(theta')|`.
/// The Jacobian `M` is assembled row by row from vector-Jacobian products.
pub fn drift_check(c: &Composite, alphas: &[Real]) -> Result<DriftReport> {
    let g = &c.graph;
    let out = g.output().ok_or_else(|| Error::Structure("composite has no output".into()))?;
    let sigma0 = c.sigma_at(&c.theta0)?;
    let m = sigma0.numel();
    let n = c.theta0.numel();
    if c.t_diag.len() != m {
        return Err(Error::Config(format!("operator has {} entries, sigma has {m}", c.t_diag.len())));
    }

    let outer = vjp(g, out, &[c.sigma])?;
    let mut v = Values::new(&outer.graph);
    v.bind(&outer.graph, c.theta, c.theta0.clone())?;
    v.bind(&outer.graph, outer.seed, Tensor::scalar(1.0))?;
    v.compute(&outer.graph, &outer.grads, false)?;
    let grad_sigma = v.value(outer.grads[0])?.data().to_vec();

    let inner = vjp(g, c.sigma, &[c.theta])?;
    let mut jac = vec![0.0; m * n];
    for i in 0..m {
        let mut seed = vec![0.0; m];
        seed[i] = 1.0;
        let bindings = HashMap::from([
            (c.theta, c.theta0.clone()),
            (inner.seed, Tensor::from_shape(sigma0.shape().clone(), seed)?),
        ]);
        let mut v = Values::new(&inner.graph);
        for (id, t) in bindings {
            v.bind(&inner.graph, id, t)?;
        }
        v.compute(&inner.graph, &inner.grads, false)?;
        jac[i * n..(i + 1) * n].copy_from_slice(v.value(inner.grads[0])?.data());
    }

    // p = M^T T grad, q = M p
    let tg: Vec<Real> = grad_sigma.iter().zip(&c.t_diag).map(|(a, b)| a * b).collect();
    let mut p = vec![0.0; n];
    for i in 0..m {
        for j in 0..n {
            p[j] += jac[i * n + j] * tg[i];
        }
    }
    let q: Vec<Real> = (0..m).map(|i| jac[i * n..(i + 1) * n].iter().zip(&p).map(|(a, b)| a * b).sum()).collect();
    let stationary = p.iter().all(|x| *x == 0.0);

    let mut rows = Vec::new();
    for (k, &alpha) in alphas.iter().enumerate() {
        let sigma_side: Vec<Real> = sigma0.data().iter().zip(&q).map(|(s, qi)| s - alpha * qi).collect();
        let theta1: Vec<Real> = c.theta0.data().iter().zip(&p).map(|(t, pi)| t - alpha * pi).collect();
        let f1 = c.sigma_at(&Tensor::from_shape(c.theta0.shape().clone(), theta1)?)?;
        let drift = sigma_side.iter().zip(f1.data()).map(|(a, b)| (a - b) * (a - b)).sum::<Real>().sqrt();
        if drift == 0.0 && !c.linear && !stationary && alpha != 0.0 {
            return Err(Error::Structure(format!("zero drift at alpha={alpha} for a nonlinear map with nonzero gradient")));
        }
        let ratio = (k > 0).then(|| rows.last().map(|r: &DriftRow| r.drift / drift)).flatten();
        rows.push(DriftRow { alpha, drift, ratio });
    }
    let scale = sigma0.max_abs().max(1.0);
    let verdict = if c.linear || stationary {
        if rows.iter().all(|r| r.drift <= 1e-12 * scale) { Verdict::Pass } else { Verdict::Fail }
    } else if rows.iter().filter_map(|r| r.ratio).all(|x| (3.0..=5.0).contains(&x)) {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(DriftReport { rows, verdict })
}
