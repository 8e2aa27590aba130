//! Text configuration format.
//!
//! One `key = value` pair per line. Keys are dotted (`attack.kind`), values
//! are bare tokens. Blank lines and text after `#` are ignored. Unknown and
//! repeated keys are errors. Every key is optional; omitted keys take the
//! desk-scale defaults of [`RunConfig::default`].
//!
//! | key | values | default |
//! |---|---|---|
//! | `seed` | unsigned integer | 0 |
//! | `clients`, `malicious`, `rounds` | integers | 20, 0, 40 |
//! | `sv_frequency` | integer >= 1 | 1 |
//! | `baseline_accuracy` | real in [0, 1] | computed per run |
//! | `model.kind` | `logistic`, `mlp` | `logistic` |
//! | `model.hidden` | integer (mlp) | 32 |
//! | `train.learning_rate`, `train.epochs`, `train.batch_size` | | 0.005, 5, 16 |
//! | `data.kind` | `synthetic`, `mnist` | `synthetic` |
//! | `data.classes`, `data.train_per_class`, `data.test_per_class`, `data.dim`, `data.spread` | synthetic | 10, 100, 300, 20, 1 |
//! | `data.dir` | MNIST directory | `$FEDSV_DATA_DIR` |
//! | `data.classes_per_client` | integer | 3 |
//! | `data.validation_fraction` | real in (0, 1) | 0.1 |
//! | `attack.kind` | `none`, `sign_flip`, `gaussian_noise`, `backdoor` | `none` |
//! | `attack.sigma`, `attack.source`, `attack.target`, `attack.start_round` | | 0.5, 0, 1, 0 |
//! | `defense.kind` | comma list of `fedsv`, `fedavg`, `coord_median`, `trimmed_mean`, `multi_krum`, `multi_krum_full` | `fedsv` |
//! | `defense.sv_method` | `exact`, `mc`, `antithetic`, `antithetic_truncated`, `stratified` | `antithetic_truncated` |
//! | `defense.sv_samples` | integer | 100 |
//! | `defense.sv_epsilon`, `defense.sv_delta` | reals; replace `sv_samples` | |
//! | `defense.sv_variance` or `defense.sv_r_max` + `defense.sv_strata` | variance bound | |
//! | `defense.sv_allocation` | `uniform`, `proportional_to_range` | `uniform` |
//! | `defense.sv_scan_len` | integer | full permutations |
//! | `defense.tol_trunc` | real >= 0 | 0.01 |
//! | `defense.lambda`, `defense.min_spread` | reals | 0, 1e-9 |
//! | `defense.threshold` | `offset`, `scaled` | `offset` |
//! | `defense.beta`, `defense.alpha`, `defense.sv_initial` | reals | 0.7, `1 - beta`, 0 |
//! | `defense.trim` | integer | `floor(N / 4)` |
//! | `defense.krum_f`, `defense.krum_selection` | integers | by knowledge, `N - f` |
//! | `metrics.wall_time` | `true`, `false` | `false` |

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::attacks::{AttackKind, AttackSpec};
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::orchestrator::{DatasetSpec, Defense, FedSvSpec, Knowledge, RunConfig};
use crate::selection::Threshold;
use crate::shapley::{Allocation, ConfidenceSpec, SampleBudget, SvMethod, VarianceBound};

const KEYS: &[&str] = &[
    "seed",
    "clients",
    "malicious",
    "rounds",
    "sv_frequency",
    "baseline_accuracy",
    "model.kind",
    "model.hidden",
    "train.learning_rate",
    "train.epochs",
    "train.batch_size",
    "data.kind",
    "data.classes",
    "data.train_per_class",
    "data.test_per_class",
    "data.dim",
    "data.spread",
    "data.dir",
    "data.classes_per_client",
    "data.validation_fraction",
    "attack.kind",
    "attack.sigma",
    "attack.source",
    "attack.target",
    "attack.start_round",
    "defense.kind",
    "defense.sv_method",
    "defense.sv_samples",
    "defense.sv_epsilon",
    "defense.sv_delta",
    "defense.sv_variance",
    "defense.sv_r_max",
    "defense.sv_strata",
    "defense.sv_allocation",
    "defense.sv_scan_len",
    "defense.tol_trunc",
    "defense.lambda",
    "defense.min_spread",
    "defense.threshold",
    "defense.beta",
    "defense.alpha",
    "defense.sv_initial",
    "defense.trim",
    "defense.krum_f",
    "defense.krum_selection",
    "metrics.wall_time",
];

const DEFAULT_HIDDEN: usize = 32;
const DEFAULT_SIGMA: f64 = 0.5;

/// A base run plus the defenses it should be run under.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// `base.defense` is `defenses[0]`.
    pub base: RunConfig,
    pub defenses: Vec<Defense>,
}

impl ExperimentConfig {
    pub fn single(run: RunConfig) -> Self {
        Self {
            defenses: vec![run.defense],
            base: run,
        }
    }

    /// One config per defense.
    pub fn runs(&self) -> Vec<RunConfig> {
        self.defenses
            .iter()
            .map(|d| RunConfig {
                defense: *d,
                ..self.base.clone()
            })
            .collect()
    }

    /// Replaces the defense list.
    pub fn with_defenses(mut self, defenses: Vec<Defense>) -> Self {
        if let Some(first) = defenses.first() {
            self.base.defense = *first;
        }
        self.defenses = defenses;
        self
    }
}

struct Entries {
    map: HashMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config {
                    line,
                    message: format!("unknown key `{key}`"),
                });
            }
            if value.is_empty() {
                return Err(Error::Config {
                    line,
                    message: format!("missing value for `{key}`"),
                });
            }
            if let Some((first, _)) = map.insert(key.to_string(), (line, value.to_string())) {
                return Err(Error::Config {
                    line,
                    message: format!("duplicate key `{key}` (first set on line {first})"),
                });
            }
        }
        Ok(Self { map })
    }

    fn line(&self, key: &str) -> usize {
        self.map.get(key).map_or(0, |(l, _)| *l)
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|(_, v)| v.as_str())
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| Error::Config {
                line: *line,
                message: format!("invalid value `{v}` for `{key}`"),
            }),
        }
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn fail<T>(&self, key: &str, message: impl Into<String>) -> Result<T> {
        Err(Error::Config {
            line: self.line(key),
            message: format!("`{key}`: {}", message.into()),
        })
    }
}

/// Parses a defense name; `None` for unknown names.
pub fn parse_defense_kind(name: &str) -> Option<Defense> {
    Some(match name {
        "fedsv" => Defense::fedsv(),
        "fedavg" => Defense::FedAvg,
        "coord_median" => Defense::CoordMedian,
        "trimmed_mean" => Defense::TrimmedMean { trim: None },
        "multi_krum" => Defense::multi_krum(Knowledge::Partial),
        "multi_krum_full" => Defense::multi_krum(Knowledge::Full),
        _ => return None,
    })
}

fn parse_defenses(e: &Entries) -> Result<Vec<Defense>> {
    let raw = e.raw("defense.kind").unwrap_or("fedsv");
    let mut fedsv = FedSvSpec::default();
    fedsv.sv.method = match e.raw("defense.sv_method") {
        None => fedsv.sv.method,
        Some(m) => match SvMethod::parse(m) {
            Some(m) => m,
            None => return e.fail("defense.sv_method", format!("unknown method `{m}`")),
        },
    };
    fedsv.sv.budget = match e.get::<f64>("defense.sv_epsilon")? {
        None => {
            for key in [
                "defense.sv_delta",
                "defense.sv_variance",
                "defense.sv_r_max",
                "defense.sv_strata",
            ] {
                if e.raw(key).is_some() {
                    return e.fail(key, "only valid together with defense.sv_epsilon");
                }
            }
            SampleBudget::Samples(e.or("defense.sv_samples", 100)?)
        }
        Some(epsilon) => {
            if e.raw("defense.sv_samples").is_some() {
                return e.fail("defense.sv_samples", "conflicts with defense.sv_epsilon");
            }
            let Some(delta) = e.get("defense.sv_delta")? else {
                return e.fail("defense.sv_epsilon", "needs defense.sv_delta");
            };
            let bound = match (e.get("defense.sv_variance")?, e.get("defense.sv_r_max")?) {
                (Some(v), None) => {
                    if e.raw("defense.sv_strata").is_some() {
                        return e.fail("defense.sv_strata", "only valid with defense.sv_r_max");
                    }
                    VarianceBound::Variance(v)
                }
                (None, Some(r_max)) => VarianceBound::Range {
                    r_max,
                    strata: e.or("defense.sv_strata", e.or("clients", 20)?)?,
                },
                _ => {
                    return e.fail(
                        "defense.sv_epsilon",
                        "needs exactly one of defense.sv_variance, defense.sv_r_max",
                    )
                }
            };
            let spec = ConfidenceSpec { epsilon, delta, bound };
            if let Err(err) = spec.validate() {
                return e.fail("defense.sv_epsilon", err.to_string());
            }
            SampleBudget::Confidence(spec)
        }
    };
    fedsv.sv.allocation = match e.raw("defense.sv_allocation") {
        None | Some("uniform") => Allocation::Uniform,
        Some("proportional_to_range") => Allocation::ProportionalToRange,
        Some(a) => return e.fail("defense.sv_allocation", format!("unknown allocation `{a}`")),
    };
    fedsv.sv.scan_len = e.get("defense.sv_scan_len")?;
    fedsv.sv.tol_trunc = e.or("defense.tol_trunc", fedsv.sv.tol_trunc)?;
    fedsv.clusfed.lambda = e.or("defense.lambda", fedsv.clusfed.lambda)?;
    fedsv.clusfed.min_spread = e.or("defense.min_spread", fedsv.clusfed.min_spread)?;
    fedsv.clusfed.threshold = match e.raw("defense.threshold") {
        None | Some("offset") => Threshold::Offset,
        Some("scaled") => Threshold::Scaled,
        Some(t) => return e.fail("defense.threshold", format!("unknown threshold form `{t}`")),
    };
    fedsv.beta = e.or("defense.beta", fedsv.beta)?;
    fedsv.alpha = e.or("defense.alpha", 1.0 - fedsv.beta)?;
    fedsv.initial_sv = e.or("defense.sv_initial", fedsv.initial_sv)?;
    let trim = e.get("defense.trim")?;
    let krum_f = e.get("defense.krum_f")?;
    let krum_selection = e.get("defense.krum_selection")?;

    let mut defenses: Vec<Defense> = Vec::new();
    for name in raw.split(',').map(str::trim) {
        let Some(base) = parse_defense_kind(name) else {
            return e.fail("defense.kind", format!("unknown defense `{name}`"));
        };
        let defense = match base {
            Defense::FedSv(_) => Defense::FedSv(fedsv),
            Defense::TrimmedMean { .. } => Defense::TrimmedMean { trim },
            Defense::MultiKrum { knowledge, .. } => Defense::MultiKrum {
                knowledge,
                byzantine: krum_f,
                selection_size: krum_selection,
            },
            other => other,
        };
        if defenses.iter().any(|d| d.label() == defense.label()) {
            return e.fail("defense.kind", format!("defense `{name}` listed twice"));
        }
        defenses.push(defense);
    }
    Ok(defenses)
}

/// Parses a configuration file's contents and validates every resulting run.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let e = Entries::parse(text)?;
    let d = RunConfig::default();

    let model = match e.raw("model.kind") {
        None | Some("logistic") => {
            if e.raw("model.hidden").is_some() {
                return e.fail("model.hidden", "only valid for model.kind = mlp");
            }
            Architecture::Logistic
        }
        Some("mlp") => Architecture::Mlp {
            hidden: e.or("model.hidden", DEFAULT_HIDDEN)?,
        },
        Some(m) => return e.fail("model.kind", format!("unknown model `{m}`")),
    };

    const SYNTH_KEYS: [&str; 5] = [
        "data.classes",
        "data.train_per_class",
        "data.test_per_class",
        "data.dim",
        "data.spread",
    ];
    let data = match e.raw("data.kind") {
        None | Some("synthetic") => {
            if e.raw("data.dir").is_some() {
                return e.fail("data.dir", "only valid for data.kind = mnist");
            }
            let DatasetSpec::Synthetic {
                classes,
                train_per_class,
                test_per_class,
                dim,
                spread,
            } = DatasetSpec::default()
            else {
                unreachable!("default dataset is synthetic")
            };
            DatasetSpec::Synthetic {
                classes: e.or("data.classes", classes)?,
                train_per_class: e.or("data.train_per_class", train_per_class)?,
                test_per_class: e.or("data.test_per_class", test_per_class)?,
                dim: e.or("data.dim", dim)?,
                spread: e.or("data.spread", spread)?,
            }
        }
        Some("mnist") => {
            if let Some(key) = SYNTH_KEYS.iter().find(|k| e.raw(k).is_some()) {
                return e.fail(key, "only valid for data.kind = synthetic");
            }
            DatasetSpec::Mnist {
                dir: e.raw("data.dir").map(PathBuf::from),
            }
        }
        Some(k) => return e.fail("data.kind", format!("unknown dataset `{k}`")),
    };

    let sigma = e.or("attack.sigma", DEFAULT_SIGMA)?;
    let source = e.or("attack.source", 0)?;
    let target = e.or("attack.target", 1)?;
    let kind = match e.raw("attack.kind").unwrap_or("none") {
        "none" => AttackKind::None,
        "sign_flip" => AttackKind::SignFlip,
        "gaussian_noise" => AttackKind::GaussianNoise { sigma },
        "backdoor" => AttackKind::BackdoorLabelFlip { source, target },
        k => return e.fail("attack.kind", format!("unknown attack `{k}`")),
    };
    let attack = AttackSpec {
        kind,
        start_round: e.or("attack.start_round", 0)?,
    };

    let defenses = parse_defenses(&e)?;
    let base = RunConfig {
        clients: e.or("clients", d.clients)?,
        malicious: e.or("malicious", d.malicious)?,
        rounds: e.or("rounds", d.rounds)?,
        model,
        train: crate::orchestrator::TrainSettings {
            learning_rate: e.or("train.learning_rate", d.train.learning_rate)?,
            epochs: e.or("train.epochs", d.train.epochs)?,
            batch_size: e.or("train.batch_size", d.train.batch_size)?,
        },
        data,
        classes_per_client: e.or("data.classes_per_client", d.classes_per_client)?,
        validation_fraction: e.or("data.validation_fraction", d.validation_fraction)?,
        attack,
        defense: defenses[0],
        sv_frequency: e.or("sv_frequency", d.sv_frequency)?,
        master_seed: e.or("seed", d.master_seed)?,
        baseline_accuracy: e.get("baseline_accuracy")?,
        record_wall_time: e.or("metrics.wall_time", d.record_wall_time)?,
    };
    let experiment = ExperimentConfig { base, defenses };
    for run in experiment.runs() {
        if let Err(err) = run.validate() {
            return Err(Error::Config {
                line: 0,
                message: format!("defense {}: {err}", run.defense.label()),
            });
        }
    }
    Ok(experiment)
}

/// Renders a configuration that [`parse_config`] maps back to an equal value.
/// All keys relevant to the configuration are written explicitly.
pub fn render_config(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: &dyn std::fmt::Display| {
        let _ = writeln!(out, "{k} = {v}");
    };
    let b = &cfg.base;
    kv("seed", &b.master_seed);
    kv("clients", &b.clients);
    kv("malicious", &b.malicious);
    kv("rounds", &b.rounds);
    kv("sv_frequency", &b.sv_frequency);
    if let Some(acc) = b.baseline_accuracy {
        kv("baseline_accuracy", &acc);
    }
    match b.model {
        Architecture::Logistic => kv("model.kind", &"logistic"),
        Architecture::Mlp { hidden } => {
            kv("model.kind", &"mlp");
            kv("model.hidden", &hidden);
        }
    }
    kv("train.learning_rate", &b.train.learning_rate);
    kv("train.epochs", &b.train.epochs);
    kv("train.batch_size", &b.train.batch_size);
    match &b.data {
        DatasetSpec::Synthetic {
            classes,
            train_per_class,
            test_per_class,
            dim,
            spread,
        } => {
            kv("data.kind", &"synthetic");
            kv("data.classes", classes);
            kv("data.train_per_class", train_per_class);
            kv("data.test_per_class", test_per_class);
            kv("data.dim", dim);
            kv("data.spread", spread);
        }
        DatasetSpec::Mnist { dir } => {
            kv("data.kind", &"mnist");
            if let Some(dir) = dir {
                kv("data.dir", &dir.display());
            }
        }
    }
    kv("data.classes_per_client", &b.classes_per_client);
    kv("data.validation_fraction", &b.validation_fraction);
    kv("attack.kind", &b.attack.kind.name());
    match b.attack.kind {
        AttackKind::GaussianNoise { sigma } => kv("attack.sigma", &sigma),
        AttackKind::BackdoorLabelFlip { source, target } => {
            kv("attack.source", &source);
            kv("attack.target", &target);
        }
        _ => {}
    }
    kv("attack.start_round", &b.attack.start_round);
    let names: Vec<&str> = cfg.defenses.iter().map(Defense::label).collect();
    kv("defense.kind", &names.join(", "));
    let mut krum_written = false;
    for defense in &cfg.defenses {
        match defense {
            Defense::FedSv(s) => {
                kv("defense.sv_method", &s.sv.method.name());
                match s.sv.budget {
                    SampleBudget::Samples(m) => kv("defense.sv_samples", &m),
                    SampleBudget::Confidence(c) => {
                        kv("defense.sv_epsilon", &c.epsilon);
                        kv("defense.sv_delta", &c.delta);
                        match c.bound {
                            VarianceBound::Variance(v) => kv("defense.sv_variance", &v),
                            VarianceBound::Range { r_max, strata } => {
                                kv("defense.sv_r_max", &r_max);
                                kv("defense.sv_strata", &strata);
                            }
                        }
                    }
                }
                let allocation = match s.sv.allocation {
                    Allocation::Uniform => "uniform",
                    Allocation::ProportionalToRange => "proportional_to_range",
                };
                kv("defense.sv_allocation", &allocation);
                if let Some(len) = s.sv.scan_len {
                    kv("defense.sv_scan_len", &len);
                }
                kv("defense.tol_trunc", &s.sv.tol_trunc);
                kv("defense.lambda", &s.clusfed.lambda);
                kv("defense.min_spread", &s.clusfed.min_spread);
                let threshold = match s.clusfed.threshold {
                    Threshold::Offset => "offset",
                    Threshold::Scaled => "scaled",
                };
                kv("defense.threshold", &threshold);
                kv("defense.beta", &s.beta);
                kv("defense.alpha", &s.alpha);
                kv("defense.sv_initial", &s.initial_sv);
            }
            Defense::TrimmedMean { trim: Some(t) } => kv("defense.trim", t),
            // Shared by both knowledge variants; written once.
            Defense::MultiKrum {
                byzantine,
                selection_size,
                ..
            } if !krum_written => {
                krum_written = true;
                if let Some(f) = byzantine {
                    kv("defense.krum_f", f);
                }
                if let Some(s) = selection_size {
                    kv("defense.krum_selection", s);
                }
            }
            _ => {}
        }
    }
    kv("metrics.wall_time", &b.record_wall_time);
    out
}
