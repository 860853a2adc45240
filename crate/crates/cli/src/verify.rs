use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;

use vgrad::verify::{exit_code, run_suite, Sampler, SuiteConfig};

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Base seed; every check derives its own stream from it
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Monte Carlo trials per estimate (below 100 the checks are inconclusive)
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    /// Random unit-vector pairs in the correlation check
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    /// Trials per step size in the descent check
    #[arg(long, default_value_t = 1000)]
    theorem_trials: usize,
    /// Entry distribution of the random operators: gaussian_unit or uniform_pm1
    #[arg(long, default_value = "gaussian_unit")]
    sampler: Sampler,
    /// Directory for the per-check CSV files
    #[arg(long, default_value = "runs/verify")]
    out_dir: PathBuf,
}

pub fn run(a: VerifyArgs) -> anyhow::Result<u8> {
    let cfg = SuiteConfig { seed: a.seed, trials: a.trials, pairs: a.pairs, theorem_trials: a.theorem_trials, sampler: a.sampler };
    let outcomes = run_suite(&cfg)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for o in &outcomes {
        fs::write(a.out_dir.join(format!("{}.csv", o.name)), &o.csv)?;
        println!("{:<10} {:<12} {}", o.name, o.verdict.name(), o.summary);
    }
    Ok(exit_code(&outcomes) as u8)
}
