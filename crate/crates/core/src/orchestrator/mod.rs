//! The federated round loop and its configuration.
//!
//! Every round the server broadcasts the global model, each client trains
//! locally from it, malicious clients transform their update, and the server
//! aggregates with the configured defense. Under FedSV the server estimates
//! Shapley values of the updates, smooths them, selects the high-value
//! cluster and averages only the selected updates.

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{self, AggregatorSpec};
use crate::attacks::{apply_attack, AttackSpec, TrainingContext};
use crate::data::{self, ClientShard, LabeledDataset, PartitionSpec};
use crate::error::{Error, Result};
use crate::model::{self, Architecture, Model, ModelSpec, TrainConfig};
use crate::params::ParamVector;
use crate::seed::{self, stream};
use crate::selection::{clusfed, ClusFedSpec, SvLedger};
use crate::shapley::{estimate_sv, FlValueFunction, SvConfig};

mod detection;
mod sweep;

pub use detection::{detection_from_rounds, detection_report, detection_report_from, DetectionReport};
pub use sweep::{
    baseline_config, malicious_count, run_sweep, run_sweep_with, success_rates, RoundSink, SuccessRate, SweepCell,
    SweepOutcome, SweepRole,
};

/// Environment variable consulted for the MNIST directory.
pub const DATA_DIR_ENV: &str = "FEDSV_DATA_DIR";

/// Fraction of the baseline accuracy a defended run must reach.
pub const SUCCESS_RATIO: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        dim: usize,
        spread: f64,
    },
    /// IDX files `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
    /// `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte` in `dir`
    /// (or in `$FEDSV_DATA_DIR` when unset).
    Mnist { dir: Option<PathBuf> },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            classes: 10,
            train_per_class: 100,
            test_per_class: 300,
            dim: 20,
            spread: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knowledge {
    /// The true number of malicious clients is known.
    Full,
    /// Assume half of the clients are malicious.
    Partial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedSvSpec {
    /// Estimator settings; the seed is replaced by a per-round substream.
    pub sv: SvConfig,
    pub clusfed: ClusFedSpec,
    pub alpha: f64,
    pub beta: f64,
    pub initial_sv: f64,
}

impl Default for FedSvSpec {
    fn default() -> Self {
        Self {
            sv: SvConfig::default(),
            clusfed: ClusFedSpec::default(),
            alpha: 1.0 - 0.7,
            beta: 0.7,
            initial_sv: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Defense {
    FedSv(FedSvSpec),
    FedAvg,
    CoordMedian,
    /// `trim` defaults to `floor(N / 4)`.
    TrimmedMean {
        trim: Option<usize>,
    },
    /// `byzantine` defaults by knowledge (`N_m` or `floor(N / 2)`);
    /// `selection_size` defaults to `N - f`.
    MultiKrum {
        knowledge: Knowledge,
        byzantine: Option<usize>,
        selection_size: Option<usize>,
    },
}

impl Defense {
    pub fn fedsv() -> Self {
        Defense::FedSv(FedSvSpec::default())
    }

    pub fn multi_krum(knowledge: Knowledge) -> Self {
        Defense::MultiKrum {
            knowledge,
            byzantine: None,
            selection_size: None,
        }
    }

    /// Name used in metrics files and reports.
    pub fn label(&self) -> &'static str {
        match self {
            Defense::FedSv(_) => "fedsv",
            Defense::FedAvg => "fedavg",
            Defense::CoordMedian => "coord_median",
            Defense::TrimmedMean { .. } => "trimmed_mean",
            Defense::MultiKrum {
                knowledge: Knowledge::Partial,
                ..
            } => "multi_krum",
            Defense::MultiKrum {
                knowledge: Knowledge::Full,
                ..
            } => "multi_krum_full",
        }
    }

    /// Resolves a non-FedSV defense to a concrete aggregation rule.
    pub fn aggregator(&self, clients: usize, malicious: usize) -> Option<AggregatorSpec> {
        Some(match *self {
            Defense::FedSv(_) => return None,
            Defense::FedAvg => AggregatorSpec::FedAvg,
            Defense::CoordMedian => AggregatorSpec::CoordMedian,
            Defense::TrimmedMean { trim } => AggregatorSpec::TrimmedMean {
                trim: trim.unwrap_or(clients / 4),
            },
            Defense::MultiKrum {
                knowledge,
                byzantine,
                selection_size,
            } => {
                let f = byzantine.unwrap_or(match knowledge {
                    Knowledge::Full => malicious,
                    Knowledge::Partial => clients / 2,
                });
                AggregatorSpec::MultiKrum {
                    byzantine: f,
                    selection_size: selection_size.unwrap_or(clients.saturating_sub(f)),
                }
            }
        })
    }
}

/// Local training hyper-parameters shared by all clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub clients: usize,
    pub malicious: usize,
    pub rounds: usize,
    pub model: Architecture,
    pub train: TrainSettings,
    pub data: DatasetSpec,
    pub classes_per_client: usize,
    /// Share of the test split held out as the server's validation set.
    pub validation_fraction: f64,
    pub attack: AttackSpec,
    pub defense: Defense,
    /// Shapley values are recomputed in rounds divisible by this.
    pub sv_frequency: usize,
    pub master_seed: u64,
    /// Clean-FedAvg accuracy the success criterion is measured against.
    pub baseline_accuracy: Option<f64>,
    /// Record per-round wall time (makes metrics non-reproducible).
    pub record_wall_time: bool,
}

impl Default for RunConfig {
    /// Desk-scale defaults: 20 clients, synthetic blobs, logistic model,
    /// 40 rounds of 5 local epochs at learning rate 0.005, batch size 16.
    fn default() -> Self {
        Self {
            clients: 20,
            malicious: 0,
            rounds: 40,
            model: Architecture::Logistic,
            train: TrainSettings {
                learning_rate: 0.005,
                epochs: 5,
                batch_size: 16,
            },
            data: DatasetSpec::default(),
            classes_per_client: 3,
            validation_fraction: 0.1,
            attack: AttackSpec::NONE,
            defense: Defense::fedsv(),
            sv_frequency: 1,
            master_seed: 0,
            baseline_accuracy: None,
            record_wall_time: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let arg = |m: String| Err(Error::Argument(m));
        if self.clients == 0 {
            return arg("at least one client is required".into());
        }
        if self.malicious > self.clients {
            return arg(format!("{} malicious of {} clients", self.malicious, self.clients));
        }
        if self.rounds == 0 || self.sv_frequency == 0 {
            return arg("rounds and sv_frequency must be >= 1".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return arg(format!(
                "validation_fraction {} outside (0, 1)",
                self.validation_fraction
            ));
        }
        TrainConfig::new(self.train.learning_rate, self.train.epochs, self.train.batch_size, 0).validate()?;
        if let Some(b) = self.baseline_accuracy {
            if !(0.0..=1.0).contains(&b) {
                return arg(format!("baseline accuracy {b} outside [0, 1]"));
            }
        }
        if let Defense::FedSv(spec) = &self.defense {
            spec.clusfed.validate()?;
            if self.clients < 2 {
                return arg("fedsv needs at least two clients".into());
            }
            SvLedger::new(self.clients, spec.alpha, spec.beta, spec.initial_sv)?;
        }
        if let Some(AggregatorSpec::TrimmedMean { trim }) = self.defense.aggregator(self.clients, self.malicious) {
            if 2 * trim >= self.clients {
                return arg(format!("trim {trim} too large for {} clients", self.clients));
            }
        }
        if let Some(AggregatorSpec::MultiKrum {
            byzantine,
            selection_size,
        }) = self.defense.aggregator(self.clients, self.malicious)
        {
            if self.clients < byzantine + 3 || selection_size == 0 || selection_size > self.clients {
                return arg(format!(
                    "multi-krum with f = {byzantine}, selection {selection_size} needs N - f - 2 >= 1 (N = {})",
                    self.clients
                ));
            }
        }
        Ok(())
    }

    pub fn malicious_fraction(&self) -> f64 {
        self.malicious as f64 / self.clients as f64
    }

    /// Identifier used for metrics rows and file names.
    pub fn run_id(&self) -> String {
        format!(
            "{}-{}-m{}-s{}",
            self.defense.label(),
            self.attack.kind.name(),
            self.malicious,
            self.master_seed
        )
    }
}

/// Metrics of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Clients whose updates formed the global model, ascending.
    pub selected: Vec<usize>,
    /// Instantaneous SVs (FedSV rounds that recomputed them).
    pub sv: Option<Vec<f64>>,
    /// Smoothed SVs after this round (FedSV only).
    pub sv_smoothed: Option<Vec<f64>>,
    pub wall_time: Option<f64>,
}

impl RoundRecord {
    pub fn excluded(&self, clients: usize) -> Vec<usize> {
        (0..clients)
            .filter(|i| self.selected.binary_search(i).is_err())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub defense: String,
    pub attack: String,
    pub clients: usize,
    pub malicious: Vec<usize>,
    pub master_seed: u64,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub baseline_accuracy: Option<f64>,
    /// `final_accuracy >= 0.8 * baseline_accuracy`, when a baseline is known.
    pub success: Option<bool>,
    /// Whole-run detection statistics (FedSV only).
    pub detection: Option<DetectionReport>,
    pub records: Vec<RoundRecord>,
}

impl RunSummary {
    pub fn is_fedsv(&self) -> bool {
        self.defense == "fedsv"
    }

    pub fn malicious_fraction(&self) -> f64 {
        self.malicious.len() as f64 / self.clients as f64
    }

    /// Re-evaluates the success flag against `baseline`.
    pub fn set_baseline(&mut self, baseline: f64) {
        self.baseline_accuracy = Some(baseline);
        self.success = Some(self.final_accuracy >= SUCCESS_RATIO * baseline);
    }
}

/// Datasets and shards for one run.
pub struct Prepared {
    pub spec: ModelSpec,
    pub shards: Vec<ClientShard>,
    pub validation: LabeledDataset,
    pub reporting: LabeledDataset,
    pub initial: ParamVector,
}

fn load_datasets(config: &RunConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    match &config.data {
        DatasetSpec::Synthetic {
            classes,
            train_per_class,
            test_per_class,
            dim,
            spread,
        } => {
            let seed = config.master_seed;
            let train = data::synth_blobs(
                *classes,
                *train_per_class,
                *dim,
                *spread,
                seed::derive(seed, stream::DATA_TRAIN, &[]),
            )?;
            let test = data::synth_blobs(
                *classes,
                *test_per_class,
                *dim,
                *spread,
                seed::derive(seed, stream::DATA_TEST, &[]),
            )?;
            Ok((train, test))
        }
        DatasetSpec::Mnist { dir } => {
            let dir = match dir {
                Some(d) => d.clone(),
                None => std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).ok_or_else(|| {
                    Error::Argument(format!("no MNIST directory configured and {DATA_DIR_ENV} unset"))
                })?,
            };
            let train = data::load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
            let test = data::load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
            Ok((train, test))
        }
    }
}

/// Builds datasets, shards and the initial model for `config`.
pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    config.validate()?;
    let (train, test) = load_datasets(config)?;
    let spec = ModelSpec {
        arch: config.model,
        input_dim: train.dim(),
        num_classes: train.num_classes(),
    };
    spec.validate()?;
    config.attack.validate(spec.num_classes)?;
    let partition = PartitionSpec {
        num_clients: config.clients,
        num_classes: train.num_classes(),
        classes_per_client: config.classes_per_client,
        seed: seed::derive(config.master_seed, stream::PARTITION, &[]),
    };
    let shards = data::partition_noniid(&train, &partition, config.malicious)?;
    let (validation, reporting) = test.split(
        config.validation_fraction,
        seed::derive(config.master_seed, stream::VALIDATION, &[]),
    )?;
    if validation.is_empty() || reporting.is_empty() {
        return Err(Error::EmptyData("test split too small for validation and reporting"));
    }
    Ok(Prepared {
        spec,
        shards,
        validation,
        reporting,
        initial: spec.init_params(seed::derive(config.master_seed, stream::INIT, &[])),
    })
}

/// Runs the simulation without a metrics sink.
pub fn run(config: &RunConfig) -> Result<RunSummary> {
    run_with_sink(config, &mut |_| Ok(()))
}

/// Client updates for one round, after attacks, in client order.
pub fn client_updates(
    config: &RunConfig,
    prepared: &Prepared,
    global: &ParamVector,
    round: usize,
) -> Result<Vec<ParamVector>> {
    let model = Model::new(prepared.spec, global.clone())?;
    let master = config.master_seed;
    prepared
        .shards
        .par_iter()
        .map(|shard| {
            let id = shard.client_id as u64;
            let train = TrainConfig::new(
                config.train.learning_rate,
                config.train.epochs,
                config.train.batch_size,
                seed::derive(master, stream::CLIENT, &[id, round as u64]),
            );
            let honest = model::local_train(&model, &shard.data, &train)?;
            let ctx = TrainingContext {
                global: &model,
                train: &train,
            };
            apply_attack(
                shard,
                &honest,
                &config.attack,
                round,
                seed::derive(master, stream::ATTACK, &[id, round as u64]),
                &ctx,
            )
        })
        .collect()
}

/// Runs the simulation, handing each round's record to `sink` as soon as it
/// is complete.
pub fn run_with_sink(config: &RunConfig, sink: &mut dyn FnMut(&RoundRecord) -> Result<()>) -> Result<RunSummary> {
    let prepared = prepare(config)?;
    let n = config.clients;
    let weights: Vec<f64> = prepared.shards.iter().map(|s| s.n_k() as f64).collect();
    let mut global = prepared.initial.clone();
    let mut selected: Vec<usize> = (0..n).collect();
    let mut ledger = match &config.defense {
        Defense::FedSv(spec) => Some(SvLedger::new(n, spec.alpha, spec.beta, spec.initial_sv)?),
        _ => None,
    };
    let aggregator = config.defense.aggregator(n, config.malicious);
    let mut records = Vec::with_capacity(config.rounds);

    for round in 1..=config.rounds {
        let started = Instant::now();
        let wrap = |e: Error| Error::Round {
            round,
            source: Box::new(e),
        };
        let updates = client_updates(config, &prepared, &global, round).map_err(wrap)?;

        let mut sv = None;
        let next = match (&config.defense, &aggregator) {
            (Defense::FedSv(spec), _) => {
                let ledger = ledger.as_mut().expect("fedsv ledger");
                if round % config.sv_frequency == 0 {
                    let game = FlValueFunction::new(prepared.spec, &updates, &weights, &global, &prepared.validation)
                        .map_err(wrap)?;
                    let cfg = SvConfig {
                        seed: seed::derive(config.master_seed, stream::SV, &[round as u64]),
                        ..spec.sv
                    };
                    let estimate = estimate_sv(&game, &cfg).map_err(wrap)?;
                    ledger.update(&estimate.values).map_err(wrap)?;
                    selected = clusfed(&ledger.smoothed, &spec.clusfed).map_err(wrap)?.selected;
                    sv = Some(estimate.values);
                }
                aggregation::fedavg_subset(&updates, &weights, &selected).map_err(wrap)?
            }
            (_, Some(rule)) => {
                let (agg, ids) = aggregation::aggregate(rule, &updates, &weights).map_err(wrap)?;
                selected = ids;
                agg
            }
            (_, None) => unreachable!("non-fedsv defenses resolve to an aggregator"),
        };
        if !next.is_finite() {
            return Err(wrap(Error::Divergence {
                epoch: config.train.epochs,
            }));
        }
        global = next;

        let eval = model::evaluate(&prepared.spec, &global, &prepared.reporting).map_err(wrap)?;
        let record = RoundRecord {
            round,
            loss: eval.loss,
            accuracy: eval.accuracy,
            selected: selected.clone(),
            sv,
            sv_smoothed: ledger.as_ref().map(|l| l.smoothed.clone()),
            wall_time: config.record_wall_time.then(|| started.elapsed().as_secs_f64()),
        };
        sink(&record)?;
        records.push(record);
    }

    let last = records.last().expect("rounds >= 1");
    let malicious: Vec<usize> = (0..config.malicious).collect();
    let mut summary = RunSummary {
        run_id: config.run_id(),
        defense: config.defense.label().to_string(),
        attack: config.attack.kind.name().to_string(),
        clients: n,
        malicious,
        master_seed: config.master_seed,
        final_loss: last.loss,
        final_accuracy: last.accuracy,
        baseline_accuracy: None,
        success: None,
        detection: None,
        records,
    };
    if ledger.is_some() {
        summary.detection = Some(detection_report(&summary, &summary.malicious)?);
    }
    if let Some(b) = config.baseline_accuracy {
        summary.set_baseline(b);
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(defense: Defense) -> RunConfig {
        RunConfig {
            clients: 6,
            rounds: 3,
            data: DatasetSpec::Synthetic {
                classes: 3,
                train_per_class: 20,
                test_per_class: 20,
                dim: 4,
                spread: 0.5,
            },
            defense,
            train: TrainSettings {
                learning_rate: 0.05,
                epochs: 2,
                batch_size: 5,
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn one_round_gives_one_record() {
        for defense in [Defense::fedsv(), Defense::FedAvg, Defense::CoordMedian] {
            let cfg = RunConfig {
                rounds: 1,
                ..small(defense)
            };
            let s = run(&cfg).unwrap();
            assert_eq!(s.records.len(), 1);
            assert_eq!(s.records[0].round, 1);
        }
    }

    #[test]
    fn records_are_ordered_and_bounded() {
        let s = run(&small(Defense::fedsv())).unwrap();
        for (i, r) in s.records.iter().enumerate() {
            assert_eq!(r.round, i + 1);
            assert!((0.0..=1.0).contains(&r.accuracy));
            assert!(r.selected.iter().all(|&c| c < 6));
            assert_eq!(r.sv.as_ref().unwrap().len(), 6);
        }
        assert!(s.detection.is_some());
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = RunConfig {
            malicious: 2,
            attack: AttackSpec::sign_flip(),
            ..small(Defense::fedsv())
        };
        assert_eq!(run(&cfg).unwrap(), run(&cfg).unwrap());
    }

    #[test]
    fn attack_none_matches_all_honest_run() {
        let base = small(Defense::FedAvg);
        let flagged = RunConfig {
            malicious: 3,
            ..base.clone()
        };
        let a = run(&base).unwrap();
        let b = run(&flagged).unwrap();
        assert_eq!(a.records, b.records);

        let prepared_a = prepare(&base).unwrap();
        let prepared_b = prepare(&flagged).unwrap();
        let ua = client_updates(&base, &prepared_a, &prepared_a.initial, 1).unwrap();
        let ub = client_updates(&flagged, &prepared_b, &prepared_b.initial, 1).unwrap();
        assert_eq!(ua, ub);
    }

    #[test]
    fn sv_frequency_reuses_selection() {
        let cfg = RunConfig {
            rounds: 4,
            sv_frequency: 2,
            ..small(Defense::fedsv())
        };
        let s = run(&cfg).unwrap();
        assert!(s.records[0].sv.is_none());
        assert_eq!(s.records[0].selected, (0..6).collect::<Vec<_>>());
        assert!(s.records[1].sv.is_some());
        assert!(s.records[2].sv.is_none());
        assert_eq!(s.records[2].selected, s.records[1].selected);
    }

    #[test]
    fn lambda_minus_one_with_wide_guard_is_fedavg() {
        // A spread guard larger than any SV range forces the one-cluster
        // fallback every round, which must reproduce plain FedAvg.
        let mut spec = FedSvSpec::default();
        spec.clusfed.lambda = -1.0;
        spec.clusfed.min_spread = 10.0;
        let fedsv = run(&small(Defense::FedSv(spec))).unwrap();
        let fedavg = run(&small(Defense::FedAvg)).unwrap();
        for (a, b) in fedsv.records.iter().zip(&fedavg.records) {
            assert_eq!(a.accuracy, b.accuracy);
            assert_eq!(a.loss, b.loss);
            assert_eq!(a.selected, b.selected);
        }
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small(Defense::FedAvg);
        cfg.malicious = 7;
        assert!(run(&cfg).is_err());
        let cfg = RunConfig {
            rounds: 0,
            ..small(Defense::FedAvg)
        };
        assert!(run(&cfg).is_err());
        let cfg = small(Defense::TrimmedMean { trim: Some(3) });
        assert!(run(&cfg).is_err());
    }

    #[test]
    fn divergence_reports_round() {
        let mut cfg = small(Defense::FedAvg);
        cfg.train.learning_rate = 1e308;
        match run(&cfg) {
            Err(Error::Round { round: 1, source }) => {
                assert!(matches!(*source, Error::Divergence { .. }), "{source}")
            }
            other => panic!("expected a round-1 divergence, got {other:?}"),
        }
    }

    #[test]
    fn defense_resolution() {
        let partial = Defense::multi_krum(Knowledge::Partial).aggregator(20, 8).unwrap();
        assert_eq!(
            partial,
            AggregatorSpec::MultiKrum {
                byzantine: 10,
                selection_size: 10
            }
        );
        let full = Defense::multi_krum(Knowledge::Full).aggregator(20, 8).unwrap();
        assert_eq!(
            full,
            AggregatorSpec::MultiKrum {
                byzantine: 8,
                selection_size: 12
            }
        );
        let trim = Defense::TrimmedMean { trim: None }.aggregator(20, 0).unwrap();
        assert_eq!(trim, AggregatorSpec::TrimmedMean { trim: 5 });
    }
}
