//! The `fedsv` command-line front end.
//!
//! Exit codes: 0 success, 2 config or usage error, 3 output I/O error,
//! 4 no metrics to report, 5 missing input file, 6 run failure (or a failed
//! sweep cell).

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fedsv_core::config::{parse_config, parse_defense_kind, render_config, ExperimentConfig};
use fedsv_core::metrics::{MetricsWriter, RunMeta};
use fedsv_core::orchestrator::{
    baseline_config, run, run_sweep_with, run_with_sink, success_rates, DetectionReport, RoundSink, RunConfig,
    RunSummary, SweepRole,
};
use fedsv_core::Error;
use serde::Serialize;

mod report;

pub use report::{report, ReportOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_OUTPUT: i32 = 3;
pub const EXIT_NO_METRICS: i32 = 4;
pub const EXIT_MISSING_INPUT: i32 = 5;
pub const EXIT_RUN_FAILED: i32 = 6;

#[derive(Debug, Parser)]
#[command(name = "fedsv", version, about = "Byzantine-robust federated learning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write its metrics file and summary.
    Run(RunArgs),
    /// Run a grid of malicious fractions x repetitions for every defense.
    Sweep(SweepArgs),
    /// Summarize a directory of metrics files.
    Report(ReportArgs),
    /// Print the fully resolved configuration.
    ConfigDump(DumpArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the defense list (comma separated).
    #[arg(long)]
    pub defense: Option<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Metrics file to write; the summary goes to `<out>.summary.json`.
    #[arg(long, default_value = "metrics.csv")]
    pub out: PathBuf,
    /// Suppress progress output.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory.
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
    /// Malicious client fractions (comma separated).
    #[arg(long, default_value = "0.2,0.4,0.5,0.55", value_delimiter = ',')]
    pub fractions: Vec<f64>,
    /// Repetitions per fraction; repetition r uses seed `seed + r`.
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory searched recursively for metrics files.
    pub metrics_dir: PathBuf,
    /// Long-format table path (default `<metrics_dir>/report_long.csv`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// First round counted in detection statistics.
    #[arg(long, default_value_t = 1)]
    pub from_round: usize,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Write to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn output(path: &Path, err: impl std::fmt::Display) -> Self {
        Self::new(EXIT_OUTPUT, format!("cannot write {}: {err}", path.display()))
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Runs a parsed command line and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Report(args) => report(&ReportOptions {
            dir: args.metrics_dir,
            out: args.out,
            from_round: args.from_round,
            quiet: args.quiet,
        }),
        Command::ConfigDump(args) => cmd_config_dump(&args),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("fedsv: {}", f.message);
            f.code
        }
    }
}

/// Reads the config file and applies command-line overrides.
pub fn load_config(args: &ConfigArgs) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(&args.config).map_err(|e| {
        let code = if e.kind() == std::io::ErrorKind::NotFound {
            EXIT_MISSING_INPUT
        } else {
            EXIT_CONFIG
        };
        Failure::new(code, format!("cannot read config {}: {e}", args.config.display()))
    })?;
    let mut cfg =
        parse_config(&text).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", args.config.display())))?;
    if let Some(seed) = args.seed {
        cfg.base.master_seed = seed;
    }
    if let Some(list) = &args.defense {
        let mut defenses = Vec::new();
        for name in list.split(',').map(str::trim) {
            let mut d = parse_defense_kind(name)
                .ok_or_else(|| Failure::new(EXIT_CONFIG, format!("unknown defense `{name}`")))?;
            // Keep parameters configured in the file for the same kind.
            if let Some(configured) = cfg.defenses.iter().find(|c| c.label() == d.label()) {
                d = *configured;
            }
            defenses.push(d);
        }
        cfg = cfg.with_defenses(defenses);
    }
    for run in cfg.runs() {
        run.validate()
            .map_err(|e| Failure::new(EXIT_CONFIG, format!("defense {}: {e}", run.defense.label())))?;
    }
    Ok(cfg)
}

fn run_failure(err: Error) -> Failure {
    match err {
        Error::Io(_) | Error::Csv(_) => Failure::new(EXIT_OUTPUT, format!("cannot write metrics: {err}")),
        other => Failure::new(EXIT_RUN_FAILED, format!("run failed: {other}")),
    }
}

/// Summary written next to a run's metrics file.
#[derive(Debug, Serialize)]
pub struct Footer<'a> {
    pub run_id: &'a str,
    pub defense: &'a str,
    pub attack: &'a str,
    pub clients: usize,
    pub malicious: &'a [usize],
    pub master_seed: u64,
    pub rounds: usize,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub baseline_accuracy: Option<f64>,
    pub success: Option<bool>,
    pub detection: Option<&'a DetectionReport>,
    pub config: String,
}

impl<'a> Footer<'a> {
    pub fn new(summary: &'a RunSummary, config: &RunConfig) -> Self {
        Self {
            run_id: &summary.run_id,
            defense: &summary.defense,
            attack: &summary.attack,
            clients: summary.clients,
            malicious: &summary.malicious,
            master_seed: summary.master_seed,
            rounds: summary.records.len(),
            final_loss: summary.final_loss,
            final_accuracy: summary.final_accuracy,
            baseline_accuracy: summary.baseline_accuracy,
            success: summary.success,
            detection: summary.detection.as_ref(),
            config: render_config(&ExperimentConfig::single(config.clone())),
        }
    }
}

fn summary_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".summary.json");
    out.with_file_name(name)
}

fn cmd_run(args: &RunArgs) -> CliResult {
    let experiment = load_config(&args.config)?;
    if experiment.defenses.len() != 1 {
        return Err(Failure::new(
            EXIT_CONFIG,
            "run takes exactly one defense; use --defense or the sweep command",
        ));
    }
    let cfg = experiment.base;
    let file = File::create(&args.out).map_err(|e| Failure::output(&args.out, e))?;
    let mut writer = MetricsWriter::new(file, RunMeta::from_config(&cfg)).map_err(|e| Failure::output(&args.out, e))?;
    let quiet = args.quiet;
    let total = cfg.rounds;
    let mut summary = run_with_sink(&cfg, &mut |r| {
        writer.write(r)?;
        if !quiet {
            eprintln!(
                "round {}/{total}: accuracy {:.4}, loss {:.4}, selected {}",
                r.round,
                r.accuracy,
                r.loss,
                r.selected.len()
            );
        }
        Ok(())
    })
    .map_err(run_failure)?;

    if summary.baseline_accuracy.is_none() {
        let clean = baseline_config(&cfg, cfg.master_seed);
        let baseline = if clean == cfg {
            summary.final_accuracy
        } else {
            if !quiet {
                eprintln!("running clean fedavg baseline");
            }
            run(&clean).map_err(run_failure)?.final_accuracy
        };
        summary.set_baseline(baseline);
    }
    let footer_path = summary_path(&args.out);
    let json = serde_json::to_string_pretty(&Footer::new(&summary, &cfg)).expect("footer serializes");
    fs::write(&footer_path, json + "\n").map_err(|e| Failure::output(&footer_path, e))?;
    if !quiet {
        eprintln!(
            "final accuracy {:.4} (baseline {:.4}, success {})",
            summary.final_accuracy,
            summary.baseline_accuracy.unwrap_or(f64::NAN),
            summary.success.unwrap_or(false)
        );
    }
    Ok(())
}

fn metrics_sink(path: PathBuf, cfg: &RunConfig) -> fedsv_core::Result<RoundSink> {
    let file = File::create(&path)?;
    let mut writer = MetricsWriter::new(file, RunMeta::from_config(cfg))?;
    Ok(Box::new(move |r| writer.write(r)))
}

fn cmd_sweep(args: &SweepArgs) -> CliResult {
    let experiment = load_config(&args.config)?;
    if args.reps == 0 {
        return Err(Failure::new(EXIT_CONFIG, "--reps must be at least 1"));
    }
    if let Some(f) = args.fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Failure::new(EXIT_CONFIG, format!("fraction {f} outside [0, 1]")));
    }
    let baseline_dir = args.out.join("baseline");
    fs::create_dir_all(&baseline_dir).map_err(|e| Failure::output(&baseline_dir, e))?;

    let out = &args.out;
    let sinks = |cfg: &RunConfig, role: SweepRole| {
        let path = match role {
            SweepRole::Baseline { .. } => baseline_dir.join(format!("{}.csv", cfg.run_id())),
            SweepRole::Cell { fraction, .. } => out.join(format!("{}-f{fraction}.csv", cfg.run_id())),
        };
        metrics_sink(path, cfg)
    };
    let outcome = run_sweep_with(
        &experiment.base,
        &experiment.defenses,
        &args.fractions,
        args.reps,
        &sinks,
    )
    .map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;

    let mut failed = 0;
    for (rep, b) in outcome.baselines.iter().enumerate() {
        if let Err(e) = b {
            eprintln!("baseline rep {rep} failed: {e}");
        }
    }
    for cell in &outcome.cells {
        match &cell.outcome {
            Ok(s) if !args.quiet => eprintln!(
                "{} fraction {} rep {}: accuracy {:.4}, success {}",
                cell.defense.label(),
                cell.fraction,
                cell.rep,
                s.final_accuracy,
                s.success.unwrap_or(false)
            ),
            Ok(_) => {}
            Err(e) => {
                failed += 1;
                eprintln!(
                    "{} fraction {} rep {} failed: {e}",
                    cell.defense.label(),
                    cell.fraction,
                    cell.rep
                );
            }
        }
    }

    let table = args.out.join("success_rates.csv");
    let write_table = || -> Result<(), Box<dyn std::error::Error>> {
        let mut w = csv::Writer::from_path(&table)?;
        w.write_record([
            "defense",
            "malicious_fraction",
            "runs",
            "successes",
            "failures",
            "success_rate",
        ])?;
        for r in success_rates(&outcome.cells) {
            w.write_record([
                r.defense.clone(),
                r.fraction.to_string(),
                r.runs.to_string(),
                r.successes.to_string(),
                r.failures.to_string(),
                r.rate.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    };
    write_table().map_err(|e| Failure::output(&table, e))?;
    if !args.quiet {
        for r in success_rates(&outcome.cells) {
            println!(
                "{:<16} fraction {:<5} success {:>5.1}% ({}/{})",
                r.defense,
                r.fraction,
                100.0 * r.rate,
                r.successes,
                r.runs
            );
        }
    }
    if failed > 0 {
        return Err(Failure::new(EXIT_RUN_FAILED, format!("{failed} sweep cell(s) failed")));
    }
    Ok(())
}

fn cmd_config_dump(args: &DumpArgs) -> CliResult {
    let cfg = load_config(&args.config)?;
    let text = render_config(&cfg);
    match &args.out {
        Some(path) => fs::write(path, text).map_err(|e| Failure::output(path, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::new(EXIT_OUTPUT, e.to_string())),
    }
}
