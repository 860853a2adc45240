use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{dot, mean_stderr, pearson_and_slope, stream_rng, McConfig, Verdict, MIN_TRIALS};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Two unit vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub v: Vec<Real>,
    pub u: Vec<Real>,
}

impl Pair {
    pub fn dot(&self) -> Real {
        dot(&self.v, &self.u)
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<Real> {
    loop {
        let x: Vec<Real> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as Real).collect();
        let norm = dot(&x, &x).sqrt();
        if norm > 1e-8 {
            return x.into_iter().map(|e| e / norm).collect();
        }
    }
}

/// A unit vector `v` and `u = cos * v + sin * w` with `w` a unit vector orthogonal to `v`.
pub(crate) fn pair_with_cos(rng: &mut ChaCha8Rng, n: usize, cos: Real) -> Pair {
    let v = unit_vector(rng, n);
    if n == 1 {
        return Pair { u: vec![v[0] * cos.signum()], v };
    }
    let w = loop {
        let x = unit_vector(rng, n);
        let proj = dot(&x, &v);
        let mut w: Vec<Real> = x.iter().zip(&v).map(|(a, b)| a - proj * b).collect();
        let norm = dot(&w, &w).sqrt();
        if norm > 1e-6 {
            w.iter_mut().for_each(|e| *e /= norm);
            break w;
        }
    };
    let sin = (1.0 - cos * cos).max(0.0).sqrt();
    let u = v.iter().zip(&w).map(|(a, b)| cos * a + sin * b).collect();
    Pair { v, u }
}

/// `count` pairs with `v^T u` uniform on `[min_dot, 1]`.
pub fn random_pairs(n: usize, count: usize, min_dot: Real, seed: u64) -> Vec<Pair> {
    (0..count)
        .map(|k| {
            let mut rng = stream_rng(seed, k as u64);
            let cos = rng.gen_range(min_dot..=1.0);
            pair_with_cos(&mut rng, n, cos)
        })
        .collect()
}

/// Monte Carlo estimate of `E[v^T M^T M u]` and its standard error.
pub fn estimate(pair: &Pair, cfg: &McConfig, rng: &mut ChaCha8Rng) -> (Real, Real) {
    let mut samples = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials {
        let mut acc = 0.0;
        for _ in 0..cfg.m {
            let (mut mv, mut mu) = (0.0, 0.0);
            for j in 0..cfg.n {
                let e = cfg.sampler.sample(rng);
                mv += e * pair.v[j];
                mu += e * pair.u[j];
            }
            acc += mv * mu;
        }
        samples.push(acc);
    }
    mean_stderr(&samples)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lemma1Row {
    pub pair_id: usize,
    pub v_dot_u: Real,
    pub estimate: Real,
    pub stderr: Real,
}

#[derive(Clone, Debug)]
pub struct Lemma1Report {
    pub rows: Vec<Lemma1Row>,
    pub pearson: Real,
    pub slope: Real,
    pub verdict: Verdict,
}

impl Lemma1Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair_id,v_dot_u,estimate,stderr\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.pair_id, r.v_dot_u, r.estimate, r.stderr);
        }
        out
    }
}

/// Scatter of `v^T u` against the estimate for `pairs` random pairs whose
/// angle is uniform on `[0, pi]`. Passes when the correlation exceeds 0.99
/// and the slope is within 5% of `m`.
pub fn lemma1_scatter(cfg: &McConfig, pairs: usize) -> Result<Lemma1Report> {
    cfg.validate()?;
    if pairs < 2 {
        return Err(Error::Config("need at least two pairs".into()));
    }
    let rows: Vec<Lemma1Row> = (0..pairs)
        .map(|k| {
            let mut rng = stream_rng(cfg.seed, k as u64);
            let angle = rng.gen_range(0.0..std::f64::consts::PI) as Real;
            let pair = pair_with_cos(&mut rng, cfg.n, angle.cos());
            let (estimate, stderr) = estimate(&pair, cfg, &mut rng);
            Lemma1Row { pair_id: k, v_dot_u: pair.dot(), estimate, stderr }
        })
        .collect();
    let x: Vec<Real> = rows.iter().map(|r| r.v_dot_u).collect();
    let y: Vec<Real> = rows.iter().map(|r| r.estimate).collect();
    let (pearson, slope) = pearson_and_slope(&x, &y);
    let m = cfg.m as Real;
    let verdict = if cfg.trials < MIN_TRIALS {
        Verdict::Inconclusive
    } else if pearson > 0.99 && ((slope - m) / m).abs() < 0.05 {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(Lemma1Report { rows, pearson, slope, verdict })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorollaryRow {
    pub pair_id: usize,
    pub v_dot_u: Real,
    pub estimate: Real,
    pub stderr: Real,
    pub positive: bool,
}

#[derive(Clone, Debug)]
pub struct CorollaryReport {
    pub rows: Vec<CorollaryRow>,
    pub positive_fraction: Real,
    pub verdict: Verdict,
}

impl CorollaryReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair_id,v_dot_u,estimate,stderr,positive\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.pair_id, r.v_dot_u, r.estimate, r.stderr, r.positive);
        }
        out
    }
}

/// Fraction of pairs (all with `v^T u > 0`) whose estimate is positive.
/// Passes at 99% or more.
pub fn corollary_positivity(cfg: &McConfig, pairs: &[Pair]) -> Result<CorollaryReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("no pairs supplied".into()));
    }
    if let Some((k, p)) = pairs.iter().enumerate().find(|(_, p)| !(p.dot() > 0.0)) {
        return Err(Error::Config(format!("pair {k} has v^T u = {} (must be positive)", p.dot())));
    }
    let rows: Vec<CorollaryRow> = pairs
        .iter()
        .enumerate()
        .map(|(k, pair)| {
            let mut rng = stream_rng(cfg.seed, k as u64);
            let (estimate, stderr) = estimate(pair, cfg, &mut rng);
            CorollaryRow { pair_id: k, v_dot_u: pair.dot(), estimate, stderr, positive: estimate > 0.0 }
        })
        .collect();
    let positive_fraction = rows.iter().filter(|r| r.positive).count() as Real / rows.len() as Real;
    let verdict = if cfg.trials < MIN_TRIALS {
        Verdict::Inconclusive
    } else if positive_fraction >= 0.99 {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(CorollaryReport { rows, positive_fraction, verdict })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(trials: usize) -> McConfig {
        McConfig { trials, ..McConfig::default() }
    }

    #[test]
    fn orthogonal_pair_estimates_zero() {
        let mut rng = stream_rng(1, 0);
        let pair = pair_with_cos(&mut rng, 10, 0.0);
        assert!(pair.dot().abs() < 1e-12);
        let (est, se) = estimate(&pair, &cfg(20_000), &mut rng);
        assert!(est.abs() < 3.0 * se, "{est} +- {se}");
    }

    #[test]
    fn identical_pair_estimates_m() {
        let mut rng = stream_rng(2, 0);
        let mut pair = pair_with_cos(&mut rng, 10, 1.0);
        pair.u = pair.v.clone();
        let (est, _) = estimate(&pair, &cfg(20_000), &mut rng);
        assert!((est - 20.0).abs() < 0.05 * 20.0, "{est}");
    }

    #[test]
    fn pairs_have_requested_dot() {
        for p in random_pairs(10, 20, 0.1, 3) {
            let d = p.dot();
            assert!((0.1..=1.0 + 1e-12).contains(&d));
            assert!((super::dot(&p.u, &p.u) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn corollary_rejects_non_positive_pairs() {
        let mut rng = stream_rng(4, 0);
        let bad = pair_with_cos(&mut rng, 10, -0.3);
        assert!(corollary_positivity(&cfg(10), &[bad]).is_err());
    }

    #[test]
    fn single_trial_is_inconclusive() {
        let pairs = random_pairs(10, 5, 0.01, 5);
        let rep = corollary_positivity(&cfg(1), &pairs).unwrap();
        assert_eq!(rep.verdict, Verdict::Inconclusive);
        let rep = lemma1_scatter(&cfg(1), 10).unwrap();
        assert_eq!(rep.verdict, Verdict::Inconclusive);
    }

    #[test]
    fn self_pair_is_always_positive() {
        let mut rng = stream_rng(6, 0);
        let mut pair = pair_with_cos(&mut rng, 10, 1.0);
        pair.u = pair.v.clone();
        let rep = corollary_positivity(&cfg(1), &[pair]).unwrap();
        assert_eq!(rep.positive_fraction, 1.0);
    }
}
