//! Smoothed Shapley values and the regularized two-cluster client selection.
//!
//! Sorted smoothed values are split at the point minimizing the two-cluster
//! within sum of squares. The high-value cluster is kept when the split cost
//! is within the one-cluster cost minus the cluster penalty `lambda`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

/// Exponentially averaged Shapley values: `sv_bar = alpha * sv_bar + beta * sv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvLedger {
    pub smoothed: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl SvLedger {
    pub fn new(clients: usize, alpha: f64, beta: f64, initial: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Argument(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !initial.is_finite() {
            return Err(Error::Argument("initial SV must be finite".into()));
        }
        Ok(Self {
            smoothed: vec![initial; clients],
            alpha,
            beta,
        })
    }

    pub fn update(&mut self, sv: &[f64]) -> Result<()> {
        ensure_len(self.smoothed.len(), sv.len())
            .map_err(|_| Error::Argument(format!("{} SVs for {} clients", sv.len(), self.smoothed.len())))?;
        if sv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("non-finite SV".into()));
        }
        for (s, v) in self.smoothed.iter_mut().zip(sv) {
            *s = self.alpha * *s + self.beta * v;
        }
        Ok(())
    }
}

/// Cluster costs over a sorted sequence in O(1) per query.
#[derive(Debug, Clone)]
pub struct PrefixCost {
    sums: Vec<f64>,
    squares: Vec<f64>,
}

impl PrefixCost {
    pub fn new(sorted: &[f64]) -> Self {
        // Centering keeps the sum-of-squares identity well conditioned.
        let shift = if sorted.is_empty() {
            0.0
        } else {
            sorted.iter().sum::<f64>() / sorted.len() as f64
        };
        let mut sums = Vec::with_capacity(sorted.len() + 1);
        let mut squares = Vec::with_capacity(sorted.len() + 1);
        let (mut s, mut q) = (0.0, 0.0);
        sums.push(0.0);
        squares.push(0.0);
        for &v in sorted {
            let c = v - shift;
            s += c;
            q += c * c;
            sums.push(s);
            squares.push(q);
        }
        Self { sums, squares }
    }

    pub fn len(&self) -> usize {
        self.sums.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `C(i, j)`: squared deviations of positions `i..=j` (1-based) from
    /// their mean.
    pub fn cost(&self, i: usize, j: usize) -> Result<f64> {
        if i == 0 || i > j || j > self.len() {
            return Err(Error::Argument(format!(
                "invalid range ({i}, {j}) for {} values",
                self.len()
            )));
        }
        let n = (j + 1 - i) as f64;
        let s = self.sums[j] - self.sums[i - 1];
        let q = self.squares[j] - self.squares[i - 1];
        Ok((q - s * s / n).max(0.0))
    }
}

/// `C(i, j)` over a sorted slice (1-based inclusive).
pub fn cluster_cost(sorted: &[f64], i: usize, j: usize) -> Result<f64> {
    PrefixCost::new(sorted).cost(i, j)
}

/// Form of the two-cluster acceptance threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    /// `N sigma^2 - lambda`
    #[default]
    Offset,
    /// `(1 - lambda) N sigma^2`
    Scaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusFedSpec {
    pub lambda: f64,
    /// Below this spread of values no split is attempted.
    pub min_spread: f64,
    pub threshold: Threshold,
}

impl Default for ClusFedSpec {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            min_spread: 1e-9,
            threshold: Threshold::Offset,
        }
    }
}

impl ClusFedSpec {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.lambda) {
            return Err(Error::Argument(format!("lambda {} outside [-1, 1]", self.lambda)));
        }
        if self.min_spread.is_nan() || self.min_spread < 0.0 {
            return Err(Error::Argument("min_spread must be >= 0".into()));
        }
        Ok(())
    }

    fn threshold_value(&self, total_cost: f64) -> f64 {
        match self.threshold {
            Threshold::Offset => total_cost - self.lambda,
            Threshold::Scaled => (1.0 - self.lambda) * total_cost,
        }
    }
}

/// Outcome of one selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Selected client ids, ascending.
    pub selected: Vec<usize>,
    /// Best split position `j*` (1-based: the low cluster is sorted
    /// positions `1..=j*`), if a split was evaluated.
    pub split: Option<usize>,
    pub split_cost: Option<f64>,
    pub threshold: Option<f64>,
}

impl Selection {
    pub fn is_split(&self, n: usize) -> bool {
        self.selected.len() < n
    }
}

/// Client ids ordered by ascending value, ties by ascending id.
pub fn sort_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order
}

/// Regularized 1-vs-2 clustering of smoothed SVs; returns the high cluster
/// when two clusters win, otherwise every client.
pub fn clusfed(values: &[f64], spec: &ClusFedSpec) -> Result<Selection> {
    spec.validate()?;
    let n = values.len();
    if n < 2 {
        return Err(Error::Argument(format!("clusfed needs at least 2 clients, got {n}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("non-finite SV".into()));
    }
    let all = Selection {
        selected: (0..n).collect(),
        split: None,
        split_cost: None,
        threshold: None,
    };
    let order = sort_order(values);
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    if sorted[n - 1] - sorted[0] < spec.min_spread {
        return Ok(all);
    }
    let costs = PrefixCost::new(&sorted);
    let mut best = (1, f64::INFINITY);
    for j in 1..n {
        let c = costs.cost(1, j)? + costs.cost(j + 1, n)?;
        if c < best.1 {
            best = (j, c);
        }
    }
    let (j_star, split_cost) = best;
    let threshold = spec.threshold_value(costs.cost(1, n)?);
    if split_cost <= threshold {
        let mut selected = order[j_star..].to_vec();
        selected.sort_unstable();
        Ok(Selection {
            selected,
            split: Some(j_star),
            split_cost: Some(split_cost),
            threshold: Some(threshold),
        })
    } else {
        Ok(Selection {
            split: Some(j_star),
            split_cost: Some(split_cost),
            threshold: Some(threshold),
            ..all
        })
    }
}
