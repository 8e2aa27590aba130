//! Sample sizes for an (epsilon, delta)-approximation via Chebyshev's
//! inequality.
//!
//! Plain Monte Carlo: `m >= Var[f_i] / (delta * eps^2)`.
//! Stratified with `d` strata of range at most `r_max`:
//! `m >= d * r_max^2 / (4 * delta * eps^2)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceBound {
    /// Upper bound on the variance of a single marginal `f_i(pi)`.
    Variance(f64),
    /// Largest per-stratum range of the marginals and the stratum count.
    Range { r_max: f64, strata: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSpec {
    pub epsilon: f64,
    pub delta: f64,
    pub bound: VarianceBound,
}

impl ConfidenceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Argument(format!("epsilon {} must be > 0", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Argument(format!("delta {} must lie in (0, 1)", self.delta)));
        }
        match self.bound {
            VarianceBound::Variance(v) if !(v > 0.0 && v.is_finite()) => {
                Err(Error::Argument(format!("variance bound {v} must be > 0")))
            }
            VarianceBound::Range { r_max, strata } if !(r_max > 0.0 && r_max.is_finite()) || strata == 0 => Err(
                Error::Argument("range bound needs r_max > 0 and at least one stratum".into()),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundMethod {
    Mc,
    Stratified,
}

/// Ceiling that forgives floating-point noise just above an integer.
fn robust_ceil(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

pub fn required_samples(spec: &ConfidenceSpec, method: BoundMethod) -> Result<usize> {
    spec.validate()?;
    let denom = spec.delta * spec.epsilon * spec.epsilon;
    let bound = match (method, spec.bound) {
        (BoundMethod::Mc, VarianceBound::Variance(var)) => var / denom,
        (BoundMethod::Stratified, VarianceBound::Range { r_max, strata }) => {
            strata as f64 * r_max * r_max / (4.0 * denom)
        }
        (BoundMethod::Mc, VarianceBound::Range { .. }) => {
            return Err(Error::Argument("the Monte Carlo bound needs a variance bound".into()))
        }
        (BoundMethod::Stratified, VarianceBound::Variance(_)) => {
            return Err(Error::Argument(
                "the stratified bound needs r_max and a stratum count".into(),
            ))
        }
    };
    Ok(robust_ceil(bound).max(1))
}
