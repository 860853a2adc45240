use std::fmt::Write as _;

use rand::Rng;

use super::{dot, mean_stderr, stream_rng, Sampler, Verdict, MIN_TRIALS};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// `J(theta) = F(f(theta))` with `f(theta) = sigma0 + M theta + kappa Q theta^2`
/// (elementwise square, expansion point `theta = 0`) and
/// `F(sigma) = 0.5 (sigma - c)^T D (sigma - c)`. `M` and `Q` are redrawn
/// for every trial; the rest is fixed per objective.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeObjective {
    pub m: usize,
    pub n: usize,
    pub kappa: Real,
    pub sampler: Sampler,
    pub sigma0: Vec<Real>,
    pub c: Vec<Real>,
    /// Diagonal of `D`, positive.
    pub d: Vec<Real>,
    /// Diagonal of the preconditioning operator, positive.
    pub t: Vec<Real>,
}

impl CompositeObjective {
    pub fn generate(m: usize, n: usize, kappa: Real, sampler: Sampler, seed: u64) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::Config("objective dimensions must be positive".into()));
        }
        for attempt in 0..10u64 {
            let mut rng = stream_rng(seed, attempt);
            let normal = |rng: &mut rand_chacha::ChaCha8Rng| Sampler::GaussianUnit.sample(rng);
            let sigma0: Vec<Real> = (0..m).map(|_| normal(&mut rng)).collect();
            let c: Vec<Real> = (0..m).map(|_| normal(&mut rng)).collect();
            let d: Vec<Real> = (0..m).map(|_| rng.gen_range(0.5..1.5)).collect();
            let t: Vec<Real> = (0..m).map(|_| rng.gen_range(0.5..1.5)).collect();
            let obj = CompositeObjective { m, n, kappa, sampler, sigma0, c, d, t };
            let g = obj.grad_f(&obj.sigma0);
            if dot(&g, &g).sqrt() > 1e-8 {
                return Ok(obj);
            }
        }
        Err(Error::Config("objective gradient vanishes at every regenerated point".into()))
    }

    /// Same objective with the identity operator.
    pub fn with_identity_operator(mut self) -> Self {
        self.t = vec![1.0; self.m];
        self
    }

    pub fn outer(&self, sigma: &[Real]) -> Real {
        0.5 * sigma.iter().zip(&self.c).zip(&self.d).map(|((s, c), d)| d * (s - c) * (s - c)).sum::<Real>()
    }

    /// Gradient of the outer function.
    pub fn grad_f(&self, sigma: &[Real]) -> Vec<Real> {
        sigma.iter().zip(&self.c).zip(&self.d).map(|((s, c), d)| d * (s - c)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoremRow {
    pub alpha: Real,
    pub mean_dj: Real,
    pub stderr: Real,
    /// `mean + 3 stderr < 0`.
    pub pass: bool,
    /// Mean of the first-order term `grad^T M delta` over the same trials.
    pub first_order_mean: Real,
}

#[derive(Clone, Debug)]
pub struct TheoremReport {
    pub rows: Vec<TheoremRow>,
    pub smallest_passing_alpha: Option<Real>,
    pub verdict: Verdict,
}

impl TheoremReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,mean_dJ,stderr,pass\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.alpha, r.mean_dj, r.stderr, r.pass);
        }
        out
    }
}

/// Change in `J` after one step `theta <- -alpha M^T T grad F` from
/// `theta = 0`, averaged over `trials` random Jacobians per step size.
pub fn theorem_descent(obj: &CompositeObjective, alphas: &[Real], trials: usize, seed: u64) -> Result<TheoremReport> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let (m, n) = (obj.m, obj.n);
    let g = obj.grad_f(&obj.sigma0);
    let tg: Vec<Real> = g.iter().zip(&obj.t).map(|(a, b)| a * b).collect();
    let j0 = obj.outer(&obj.sigma0);
    let mut dj = vec![Vec::with_capacity(trials); alphas.len()];
    let mut first = vec![Vec::with_capacity(trials); alphas.len()];
    for k in 0..trials {
        let mut rng = stream_rng(seed, k as u64);
        let jac: Vec<Real> = (0..m * n).map(|_| obj.sampler.sample(&mut rng)).collect();
        let quad: Vec<Real> = (0..m * n).map(|_| obj.sampler.sample(&mut rng)).collect();
        // p = M^T (T g)
        let mut p = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                p[j] += jac[i * n + j] * tg[i];
            }
        }
        for (a, &alpha) in alphas.iter().enumerate() {
            let delta: Vec<Real> = p.iter().map(|v| -alpha * v).collect();
            let mut sigma = obj.sigma0.clone();
            let mut lin = 0.0;
            for i in 0..m {
                let row = &jac[i * n..(i + 1) * n];
                let md = dot(row, &delta);
                let qd: Real = quad[i * n..(i + 1) * n].iter().zip(&delta).map(|(q, d)| q * d * d).sum();
                sigma[i] += md + obj.kappa * qd;
                lin += g[i] * md;
            }
            dj[a].push(obj.outer(&sigma) - j0);
            first[a].push(lin);
        }
    }
    let rows: Vec<TheoremRow> = alphas
        .iter()
        .enumerate()
        .map(|(a, &alpha)| {
            let (mean_dj, stderr) = mean_stderr(&dj[a]);
            let (first_order_mean, _) = mean_stderr(&first[a]);
            TheoremRow { alpha, mean_dj, stderr, pass: mean_dj + 3.0 * stderr < 0.0, first_order_mean }
        })
        .collect();
    let smallest_passing_alpha = rows.iter().filter(|r| r.pass).map(|r| r.alpha).reduce(Real::min);
    let verdict = if trials < MIN_TRIALS {
        Verdict::Inconclusive
    } else if smallest_passing_alpha.is_some() {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(TheoremReport { rows, smallest_passing_alpha, verdict })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_step_changes_nothing() {
        let obj = CompositeObjective::generate(8, 4, 0.5, Sampler::GaussianUnit, 1).unwrap();
        let rep = theorem_descent(&obj, &[0.0], 50, 2).unwrap();
        assert_eq!(rep.rows[0].mean_dj, 0.0);
        assert_eq!(rep.rows[0].stderr, 0.0);
    }

    #[test]
    fn linear_identity_case_is_pathwise_descent() {
        let obj = CompositeObjective::generate(8, 4, 0.0, Sampler::GaussianUnit, 3).unwrap().with_identity_operator();
        let g = obj.grad_f(&obj.sigma0);
        for k in 0..20 {
            let rep = theorem_descent(&obj, &[1e-4], 1, 100 + k).unwrap();
            // closed form: -alpha |M^T g|^2 + 0.5 alpha^2 |D^(1/2) M M^T g|^2,
            // so the change sits just above the (negative) first-order term
            let r = &rep.rows[0];
            let lin = r.first_order_mean;
            assert!(r.mean_dj < 0.0 && lin < 0.0);
            assert!(r.mean_dj >= lin && r.mean_dj - lin < 1e-2 * lin.abs(), "{} vs {lin}", r.mean_dj);
        }
        assert!(g.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn small_alpha_matches_first_order_term() {
        let obj = CompositeObjective::generate(20, 10, 0.0, Sampler::GaussianUnit, 4).unwrap().with_identity_operator();
        let rep = theorem_descent(&obj, &[1e-4], 500, 5).unwrap();
        let r = &rep.rows[0];
        assert!(((r.mean_dj - r.first_order_mean) / r.first_order_mean).abs() < 0.01);
    }
}
