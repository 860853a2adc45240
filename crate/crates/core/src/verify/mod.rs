//! Monte Carlo checks of the convergence analysis: proportionality of
//! `E[v^T M^T M u]` to `v^T u`, positivity of that expectation, expected
//! descent of the composite objective, and the second-order drift between
//! the hidden-space and parameter-space iterations.
//!
//! Every routine is a pure function of its seed. Randomness for pair or
//! trial `k` comes from its own ChaCha stream, so reports are reproducible
//! byte for byte.

mod drift;
mod lemma;
mod theorem;

pub use drift::{drift_check, Composite, DriftReport, DriftRow};
pub use lemma::{corollary_positivity, lemma1_scatter, random_pairs, CorollaryReport, CorollaryRow, Lemma1Report, Lemma1Row, Pair};
pub use theorem::{theorem_descent, CompositeObjective, TheoremReport, TheoremRow};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Fewer trials than this make a statistical check inconclusive.
pub const MIN_TRIALS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Distribution of random matrix entries. Both have zero mean and unit variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Sampler {
    #[default]
    GaussianUnit,
    /// Uniform on `[-sqrt(3), sqrt(3)]`.
    UniformPm1,
}

impl Sampler {
    pub fn name(self) -> &'static str {
        match self {
            Sampler::GaussianUnit => "gaussian_unit",
            Sampler::UniformPm1 => "uniform_pm1",
        }
    }

    pub fn sample(self, rng: &mut impl Rng) -> Real {
        match self {
            Sampler::GaussianUnit => rng.sample::<f64, _>(StandardNormal) as Real,
            Sampler::UniformPm1 => (rng.gen_range(-1.0f64..1.0) * 3f64.sqrt()) as Real,
        }
    }
}

impl FromStr for Sampler {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_unit" => Ok(Sampler::GaussianUnit),
            "uniform_pm1" => Ok(Sampler::UniformPm1),
            other => Err(Error::Config(format!("unknown sampler `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McConfig {
    pub trials: usize,
    /// Rows of the random matrix.
    pub m: usize,
    /// Columns of the random matrix (vector dimension).
    pub n: usize,
    pub sampler: Sampler,
    pub seed: u64,
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.m == 0 || self.n == 0 {
            return Err(Error::Config("trials, m and n must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig { trials: 10_000, m: 20, n: 10, sampler: Sampler::GaussianUnit, seed: 0 }
    }
}

/// Independent stream `stream` of the generator seeded by `seed`.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mean and standard error of the mean.
pub(crate) fn mean_stderr(xs: &[Real]) -> (Real, Real) {
    let n = xs.len() as Real;
    let mean = xs.iter().sum::<Real>() / n;
    if xs.len() < 2 {
        return (mean, Real::INFINITY);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<Real>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub(crate) fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pearson correlation and least-squares slope of `y` on `x`.
pub fn pearson_and_slope(x: &[Real], y: &[Real]) -> (Real, Real) {
    let n = x.len() as Real;
    let mx = x.iter().sum::<Real>() / n;
    let my = y.iter().sum::<Real>() / n;
    let sxy: Real = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: Real = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: Real = y.iter().map(|b| (b - my) * (b - my)).sum();
    (sxy / (sxx * syy).sqrt(), sxy / sxx)
}

/// One named check of the suite with its CSV body.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub verdict: Verdict,
    pub summary: String,
    pub csv: String,
}

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub seed: u64,
    pub trials: usize,
    pub pairs: usize,
    pub theorem_trials: usize,
    pub sampler: Sampler,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { seed: 0, trials: 10_000, pairs: 200, theorem_trials: 1000, sampler: Sampler::GaussianUnit }
    }
}

pub const THEOREM_ALPHAS: [Real; 5] = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2];
pub const DRIFT_ALPHAS: [Real; 3] = [0.04, 0.02, 0.01];

/// Runs all four checks with the suite defaults.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<CheckOutcome>> {
    let mc = McConfig { trials: cfg.trials, m: 20, n: 10, sampler: cfg.sampler, seed: cfg.seed };
    let lemma = lemma1_scatter(&mc, cfg.pairs)?;
    let pairs = random_pairs(mc.n, 100, 0.1, cfg.seed.wrapping_add(1));
    let cor = corollary_positivity(&McConfig { seed: cfg.seed.wrapping_add(2), ..mc.clone() }, &pairs)?;
    let obj = CompositeObjective::generate(20, 10, 0.5, cfg.sampler, cfg.seed.wrapping_add(3))?;
    let thm = theorem_descent(&obj, &THEOREM_ALPHAS, cfg.theorem_trials, cfg.seed.wrapping_add(4))?;
    let nonlinear = Composite::elementwise_square(10, cfg.seed.wrapping_add(5))?;
    let linear = Composite::linear(20, 10, cfg.seed.wrapping_add(6))?;
    let d_nl = drift_check(&nonlinear, &DRIFT_ALPHAS)?;
    let d_lin = drift_check(&linear, &DRIFT_ALPHAS)?;
    let drift_verdict = if d_nl.verdict == Verdict::Pass && d_lin.verdict == Verdict::Pass { Verdict::Pass } else { Verdict::Fail };
    Ok(vec![
        CheckOutcome {
            name: "lemma1",
            verdict: lemma.verdict,
            summary: format!("pearson={} slope={} (expected {})", lemma.pearson, lemma.slope, mc.m),
            csv: lemma.to_csv(),
        },
        CheckOutcome {
            name: "corollary",
            verdict: cor.verdict,
            summary: format!("positive fraction={}", cor.positive_fraction),
            csv: cor.to_csv(),
        },
        CheckOutcome {
            name: "theorem",
            verdict: thm.verdict,
            summary: match thm.smallest_passing_alpha {
                Some(a) => format!("smallest significantly negative alpha={a}"),
                None => "no alpha with significantly negative mean".to_string(),
            },
            csv: thm.to_csv(),
        },
        CheckOutcome {
            name: "drift",
            verdict: drift_verdict,
            summary: format!(
                "nonlinear ratios={:?} linear max drift={}",
                d_nl.rows.iter().filter_map(|r| r.ratio).collect::<Vec<_>>(),
                d_lin.rows.iter().map(|r| r.drift).fold(0.0, Real::max)
            ),
            csv: format!("{}{}", d_nl.to_csv(), d_lin.to_csv_rows()),
        },
    ])
}

/// 0 when everything passed, 1 on any failure, 2 when something was inconclusive.
pub fn exit_code(outcomes: &[CheckOutcome]) -> i32 {
    if outcomes.iter().any(|o| o.verdict == Verdict::Fail) {
        1
    } else if outcomes.iter().any(|o| o.verdict == Verdict::Inconclusive) {
        2
    } else {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samplers_have_unit_variance() {
        for s in [Sampler::GaussianUnit, Sampler::UniformPm1] {
            let mut rng = stream_rng(9, 0);
            let xs: Vec<Real> = (0..200_000).map(|_| s.sample(&mut rng)).collect();
            let (mean, _) = mean_stderr(&xs);
            let var = xs.iter().map(|x| x * x).sum::<Real>() / xs.len() as Real;
            assert!(mean.abs() < 0.01 && (var - 1.0).abs() < 0.01, "{} {mean} {var}", s.name());
        }
    }

    #[test]
    fn pearson_of_exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [3.0, 5.0, 7.0, 9.0];
        let (r, slope) = pearson_and_slope(&x, &y);
        assert!((r - 1.0).abs() < 1e-12 && (slope - 2.0).abs() < 1e-12);
    }
}
