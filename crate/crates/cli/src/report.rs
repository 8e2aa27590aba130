use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use fedsv_core::metrics::{read_metrics, MetricsRow};
use fedsv_core::orchestrator::{detection_from_rounds, SUCCESS_RATIO};

use crate::{CliResult, Failure, EXIT_MISSING_INPUT, EXIT_NO_METRICS};

pub struct ReportOptions {
    pub dir: PathBuf,
    pub out: Option<PathBuf>,
    pub from_round: usize,
    pub quiet: bool,
}

/// Tables written by the CLI itself, never metrics files.
const OWN_OUTPUTS: [&str; 2] = ["success_rates.csv", "report_long.csv"];

struct Run {
    run_id: String,
    defense: String,
    attack: String,
    fraction: f64,
    clients: usize,
    rows: Vec<MetricsRow>,
}

impl Run {
    fn final_accuracy(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.accuracy)
    }

    /// Seed encoded as the `-s<seed>` suffix of the run id.
    fn seed(&self) -> Option<u64> {
        self.run_id.rsplit_once("-s").and_then(|(_, s)| s.parse().ok())
    }

    fn is_baseline(&self) -> bool {
        self.defense == "fedavg" && self.attack == "none" && self.fraction == 0.0
    }
}

fn collect_runs(dir: &Path, skip: &Path) -> Vec<Run> {
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv") && p != skip)
        .filter(|p| !p.file_name().is_some_and(|n| OWN_OUTPUTS.iter().any(|o| n == *o)))
        .collect();
    files.sort();

    let mut runs = Vec::new();
    for path in files {
        let table = match File::open(&path)
            .map_err(fedsv_core::Error::from)
            .and_then(read_metrics)
        {
            Ok(t) => t,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", path.display());
                continue;
            }
        };
        for s in &table.skipped {
            eprintln!("warning: {}: skipped {s}", path.display());
        }
        let mut by_id: BTreeMap<String, Vec<MetricsRow>> = BTreeMap::new();
        for row in table.rows {
            by_id.entry(row.run_id.clone()).or_default().push(row);
        }
        for (run_id, mut rows) in by_id {
            rows.sort_by_key(|r| r.round);
            let first = &rows[0];
            runs.push(Run {
                defense: first.defense.clone(),
                attack: first.attack.clone(),
                fraction: first.malicious_fraction,
                clients: table.clients,
                run_id,
                rows,
            });
        }
    }
    runs
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Prints grouped statistics and writes the long-format table.
pub fn report(opts: &ReportOptions) -> CliResult {
    if !opts.dir.is_dir() {
        return Err(Failure::new(
            EXIT_MISSING_INPUT,
            format!("metrics directory {} not found", opts.dir.display()),
        ));
    }
    let out = opts.out.clone().unwrap_or_else(|| opts.dir.join("report_long.csv"));
    let runs = collect_runs(&opts.dir, &out);
    if runs.is_empty() {
        return Err(Failure::new(
            EXIT_NO_METRICS,
            format!("no valid metrics rows under {}", opts.dir.display()),
        ));
    }

    let baselines: Vec<&Run> = runs.iter().filter(|r| r.is_baseline()).collect();
    let baseline_by_seed: BTreeMap<u64, f64> = baselines
        .iter()
        .filter_map(|r| r.seed().map(|s| (s, r.final_accuracy())))
        .collect();
    let baseline_mean = (!baselines.is_empty())
        .then(|| baselines.iter().map(|r| r.final_accuracy()).sum::<f64>() / baselines.len() as f64);
    let baseline_of = |r: &Run| {
        r.seed()
            .and_then(|s| baseline_by_seed.get(&s).copied())
            .or(baseline_mean)
    };

    if let Some(b) = baseline_mean {
        println!(
            "baseline accuracy (clean fedavg): {b:.4} over {} run(s)",
            baselines.len()
        );
    } else {
        println!("baseline accuracy: none found (success rates unavailable)");
    }

    let mut groups: BTreeMap<(String, String, String), Vec<&Run>> = BTreeMap::new();
    for r in &runs {
        let key = (r.defense.clone(), r.attack.clone(), format!("{:.4}", r.fraction));
        groups.entry(key).or_default().push(r);
    }
    println!(
        "{:<16} {:<15} {:>8} {:>5} {:>17} {:>8}  detection",
        "defense", "attack", "fraction", "runs", "final accuracy", "success"
    );
    for ((defense, attack, fraction), members) in &groups {
        let accs: Vec<f64> = members.iter().map(|r| r.final_accuracy()).collect();
        let (mean, std) = mean_std(&accs);
        let judged: Vec<bool> = members
            .iter()
            .filter_map(|r| baseline_of(r).map(|b| r.final_accuracy() >= SUCCESS_RATIO * b))
            .collect();
        let success = if judged.is_empty() {
            "n/a".to_string()
        } else {
            format!(
                "{:.1}%",
                100.0 * judged.iter().filter(|s| **s).count() as f64 / judged.len() as f64
            )
        };
        let detection = if defense == "fedsv" {
            let reports: Vec<_> = members
                .iter()
                .filter_map(|r| {
                    let malicious: Vec<usize> = (0..(r.fraction * r.clients as f64).round() as usize).collect();
                    let rounds = r
                        .rows
                        .iter()
                        .filter(|row| row.sv.is_some())
                        .map(|row| (row.round, row.excluded.clone()));
                    detection_from_rounds(rounds, &malicious, opts.from_round).ok()
                })
                .collect();
            let n = reports.len().max(1) as f64;
            let full: Vec<usize> = reports.iter().filter_map(|d| d.rounds_to_full_exclusion).collect();
            format!(
                "precision {:.3}, recall {:.3}, false exclusions {:.1}/run, full exclusion {}/{}{}",
                reports.iter().map(|d| d.precision).sum::<f64>() / n,
                reports.iter().map(|d| d.recall).sum::<f64>() / n,
                reports.iter().map(|d| d.false_exclusions).sum::<usize>() as f64 / n,
                full.len(),
                reports.len(),
                if full.is_empty() {
                    String::new()
                } else {
                    format!(
                        " (mean round {:.1})",
                        full.iter().sum::<usize>() as f64 / full.len() as f64
                    )
                }
            )
        } else {
            "-".to_string()
        };
        println!(
            "{defense:<16} {attack:<15} {fraction:>8} {:>5} {:>8.4} ± {:<6.4} {success:>8}  {detection}",
            members.len(),
            mean,
            std
        );
    }

    let write = || -> Result<(), Box<dyn std::error::Error>> {
        let mut w = csv::Writer::from_path(&out)?;
        w.write_record([
            "run_id",
            "defense",
            "attack",
            "malicious_fraction",
            "round",
            "series",
            "value",
        ])?;
        for r in &runs {
            for row in &r.rows {
                let series = [
                    ("accuracy", row.accuracy),
                    ("loss", row.loss),
                    ("selected_count", row.selected_count as f64),
                ];
                for (name, value) in series {
                    w.write_record([
                        r.run_id.as_str(),
                        r.defense.as_str(),
                        r.attack.as_str(),
                        &r.fraction.to_string(),
                        &row.round.to_string(),
                        name,
                        &value.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| Failure::output(&out, e))?;
    if !opts.quiet {
        eprintln!("long-format table written to {}", out.display());
    }
    Ok(())
}
