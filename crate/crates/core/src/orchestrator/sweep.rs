use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_with_sink, Defense, RoundRecord, RunConfig, RunSummary};
use crate::attacks::AttackSpec;
use crate::error::{Error, Result};

/// Malicious client count for a fraction of `clients`, rounded to nearest.
pub fn malicious_count(fraction: f64, clients: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Argument(format!("malicious fraction {fraction} outside [0, 1]")));
    }
    Ok((fraction * clients as f64).round() as usize)
}

/// The clean FedAvg run success is measured against.
pub fn baseline_config(base: &RunConfig, seed: u64) -> RunConfig {
    RunConfig {
        malicious: 0,
        attack: AttackSpec::NONE,
        defense: Defense::FedAvg,
        master_seed: seed,
        baseline_accuracy: None,
        ..base.clone()
    }
}

/// One grid cell of a sweep.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub defense: Defense,
    pub fraction: f64,
    pub malicious: usize,
    pub rep: usize,
    pub seed: u64,
    /// The run, or the error that stopped it.
    pub outcome: std::result::Result<RunSummary, String>,
}

/// Result of a sweep: per-repetition baselines and the grid.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// Clean baselines by repetition; empty when the base config fixes the
    /// baseline accuracy.
    pub baselines: Vec<std::result::Result<RunSummary, String>>,
    pub cells: Vec<SweepCell>,
}

/// Which run of a sweep a sink is requested for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepRole {
    Baseline { rep: usize },
    Cell { fraction: f64, rep: usize },
}

/// Per-round consumer of one sweep run.
pub type RoundSink = Box<dyn FnMut(&RoundRecord) -> Result<()> + Send>;

/// Runs `defenses x fractions x reps`, repetition `r` using seed
/// `master_seed + r`. Cell failures are recorded, not propagated.
pub fn run_sweep(base: &RunConfig, defenses: &[Defense], fractions: &[f64], reps: usize) -> Result<SweepOutcome> {
    run_sweep_with(base, defenses, fractions, reps, &|_, _| Ok(Box::new(|_| Ok(()))))
}

/// [`run_sweep`] with a sink per run, created by `sinks` before the run
/// starts. Runs execute concurrently.
pub fn run_sweep_with(
    base: &RunConfig,
    defenses: &[Defense],
    fractions: &[f64],
    reps: usize,
    sinks: &(dyn Fn(&RunConfig, SweepRole) -> Result<RoundSink> + Sync),
) -> Result<SweepOutcome> {
    if reps == 0 {
        return Err(Error::Argument("repetitions must be >= 1".into()));
    }
    let mut grid = Vec::new();
    for defense in defenses {
        for &fraction in fractions {
            let malicious = malicious_count(fraction, base.clients)?;
            for rep in 0..reps {
                grid.push((*defense, fraction, malicious, rep));
            }
        }
    }
    if grid.is_empty() {
        return Ok(SweepOutcome {
            baselines: Vec::new(),
            cells: Vec::new(),
        });
    }
    let seed_of = |rep: usize| base.master_seed.wrapping_add(rep as u64);
    let baselines: Vec<_> = match base.baseline_accuracy {
        Some(_) => Vec::new(),
        None => (0..reps)
            .into_par_iter()
            .map(|rep| run_sunk(&baseline_config(base, seed_of(rep)), SweepRole::Baseline { rep }, sinks))
            .collect(),
    };
    let cells = grid
        .into_par_iter()
        .map(|(defense, fraction, malicious, rep)| {
            let seed = seed_of(rep);
            let baseline = match (&base.baseline_accuracy, baselines.get(rep)) {
                (Some(b), _) => Ok(*b),
                (None, Some(Ok(s))) => Ok(s.final_accuracy),
                (None, Some(Err(e))) => Err(format!("baseline failed: {e}")),
                (None, None) => unreachable!("one baseline per repetition"),
            };
            let outcome = baseline.and_then(|b| {
                let cfg = RunConfig {
                    defense,
                    malicious,
                    master_seed: seed,
                    baseline_accuracy: Some(b),
                    ..base.clone()
                };
                run_sunk(&cfg, SweepRole::Cell { fraction, rep }, sinks)
            });
            SweepCell {
                defense,
                fraction,
                malicious,
                rep,
                seed,
                outcome,
            }
        })
        .collect();
    Ok(SweepOutcome { baselines, cells })
}

fn run_sunk(
    cfg: &RunConfig,
    role: SweepRole,
    sinks: &(dyn Fn(&RunConfig, SweepRole) -> Result<RoundSink> + Sync),
) -> std::result::Result<RunSummary, String> {
    let mut sink = sinks(cfg, role).map_err(|e| e.to_string())?;
    run_with_sink(cfg, &mut *sink).map_err(|e| e.to_string())
}

/// Success rate of one (defense, fraction) cell group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessRate {
    pub defense: String,
    pub fraction: f64,
    pub runs: usize,
    pub successes: usize,
    pub failures: usize,
    pub rate: f64,
}

/// Aggregates cells by (defense, fraction) in first-appearance order.
/// Failed runs count as unsuccessful.
pub fn success_rates(cells: &[SweepCell]) -> Vec<SuccessRate> {
    let mut rates: Vec<SuccessRate> = Vec::new();
    for cell in cells {
        let label = cell.defense.label();
        let idx = match rates
            .iter()
            .position(|r| r.defense == label && r.fraction == cell.fraction)
        {
            Some(i) => i,
            None => {
                rates.push(SuccessRate {
                    defense: label.to_string(),
                    fraction: cell.fraction,
                    runs: 0,
                    successes: 0,
                    failures: 0,
                    rate: 0.0,
                });
                rates.len() - 1
            }
        };
        let r = &mut rates[idx];
        r.runs += 1;
        match &cell.outcome {
            Ok(s) if s.success == Some(true) => r.successes += 1,
            Ok(_) => {}
            Err(_) => r.failures += 1,
        }
        r.rate = r.successes as f64 / r.runs as f64;
    }
    rates
}
