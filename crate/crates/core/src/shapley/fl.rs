//! The federated value function and the per-round estimator dispatch.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    antithetic_shapley_with, exact_shapley, mc_shapley_with, required_samples, stratified_shapley, Allocation,
    BoundMethod, Coalition, CoalitionGame, ConfidenceSpec, ScanOptions, SvEstimate, SvMethod,
};
use crate::aggregation;
use crate::data::LabeledDataset;
use crate::error::{ensure_len, Error, Result};
use crate::model::{self, ModelSpec};
use crate::params::ParamVector;

/// Scores a coalition of client updates by the validation accuracy of their
/// sample-weighted average. The empty coalition scores the previous global
/// model. Values are memoized by coalition for the lifetime of the object
/// (one round).
pub struct FlValueFunction<'a> {
    spec: ModelSpec,
    updates: &'a [ParamVector],
    weights: &'a [f64],
    previous: &'a ParamVector,
    validation: &'a LabeledDataset,
    cache: Option<Mutex<HashMap<Coalition, f64>>>,
}

impl<'a> FlValueFunction<'a> {
    pub fn new(
        spec: ModelSpec,
        updates: &'a [ParamVector],
        weights: &'a [f64],
        previous: &'a ParamVector,
        validation: &'a LabeledDataset,
    ) -> Result<Self> {
        if updates.is_empty() {
            return Err(Error::EmptySelection);
        }
        if updates.len() > super::MAX_PLAYERS {
            return Err(Error::Capacity(format!("{} clients in one game", updates.len())));
        }
        ensure_len(updates.len(), weights.len())?;
        ensure_len(spec.param_count(), previous.len())?;
        for u in updates {
            ensure_len(previous.len(), u.len())?;
        }
        if validation.is_empty() {
            return Err(Error::EmptyData("server validation set is empty"));
        }
        ensure_len(spec.input_dim, validation.dim())?;
        Ok(Self {
            spec,
            updates,
            weights,
            previous,
            validation,
            cache: Some(Mutex::new(HashMap::new())),
        })
    }

    /// Disables memoization (every call re-evaluates).
    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }

    /// Aggregated parameters of a non-empty coalition.
    pub fn coalition_model(&self, coalition: Coalition) -> Result<ParamVector> {
        let members: Vec<usize> = coalition.members().take_while(|&i| i < self.updates.len()).collect();
        aggregation::fedavg_subset(self.updates, self.weights, &members)
    }

    fn compute(&self, coalition: Coalition) -> f64 {
        let acc = if coalition.is_empty() {
            model::accuracy(&self.spec, self.previous, self.validation)
        } else {
            self.coalition_model(coalition)
                .and_then(|p| model::accuracy(&self.spec, &p, self.validation))
        };
        acc.expect("inputs validated at construction")
    }
}

impl CoalitionGame for FlValueFunction<'_> {
    fn player_count(&self) -> usize {
        self.updates.len()
    }

    fn value(&self, coalition: Coalition) -> f64 {
        let Some(cache) = &self.cache else {
            return self.compute(coalition);
        };
        if let Some(&v) = cache.lock().expect("cache lock").get(&coalition) {
            return v;
        }
        let v = self.compute(coalition);
        // Concurrent misses compute the same deterministic value; first insert wins.
        *cache.lock().expect("cache lock").entry(coalition).or_insert(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleBudget {
    /// A fixed number of permutations (per player for stratified sampling).
    Samples(usize),
    /// Derive the budget from an (epsilon, delta) requirement.
    Confidence(ConfidenceSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvConfig {
    pub method: SvMethod,
    pub budget: SampleBudget,
    /// Truncation tolerance, used by [`SvMethod::AntitheticTruncated`].
    pub tol_trunc: f64,
    pub allocation: Allocation,
    pub scan_len: Option<usize>,
    pub seed: u64,
}

impl Default for SvConfig {
    fn default() -> Self {
        Self {
            method: SvMethod::AntitheticTruncated,
            budget: SampleBudget::Samples(100),
            tol_trunc: 0.01,
            allocation: Allocation::Uniform,
            scan_len: None,
            seed: 0,
        }
    }
}

impl SvConfig {
    /// Number of samples the configured budget resolves to.
    pub fn sample_count(&self) -> Result<usize> {
        match self.budget {
            SampleBudget::Samples(m) => Ok(m),
            SampleBudget::Confidence(spec) => {
                let method = match self.method {
                    SvMethod::Stratified => BoundMethod::Stratified,
                    _ => BoundMethod::Mc,
                };
                let m = required_samples(&spec, method)?;
                Ok(match self.method {
                    SvMethod::Antithetic | SvMethod::AntitheticTruncated => m + m % 2,
                    _ => m,
                })
            }
        }
    }
}

/// Shapley values of every player of `game` with the configured estimator.
pub fn estimate_sv<G: CoalitionGame + Sync + ?Sized>(game: &G, cfg: &SvConfig) -> Result<SvEstimate> {
    if cfg.method == SvMethod::Exact {
        return exact_shapley(game);
    }
    let m = cfg.sample_count()?;
    let plain = ScanOptions {
        tol_trunc: 0.0,
        scan_len: cfg.scan_len,
    };
    match cfg.method {
        SvMethod::Exact => unreachable!(),
        SvMethod::Mc => mc_shapley_with(game, m, cfg.seed, &plain),
        SvMethod::Antithetic => antithetic_shapley_with(game, m, cfg.seed, &plain),
        SvMethod::AntitheticTruncated => {
            let opts = ScanOptions {
                tol_trunc: cfg.tol_trunc,
                ..plain
            };
            let mut est = antithetic_shapley_with(game, m, cfg.seed, &opts)?;
            est.method = SvMethod::AntitheticTruncated;
            Ok(est)
        }
        SvMethod::Stratified => stratified_shapley(game, m, cfg.allocation, cfg.seed),
    }
}
