//! Shapley values of coalition games: exact enumeration and the permutation
//! sampling estimators (plain Monte Carlo, antithetic pairs, truncated
//! scans, position-stratified sampling), plus the federated value function
//! that scores coalitions of client updates.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod bounds;
mod exact;
mod fl;
mod sampling;
mod stratified;

pub use bounds::{required_samples, BoundMethod, ConfidenceSpec, VarianceBound};
pub use exact::exact_shapley;
pub use fl::{estimate_sv, FlValueFunction, SampleBudget, SvConfig};
pub use sampling::{
    antithetic_shapley, antithetic_shapley_with, mc_shapley, mc_shapley_enumerated, mc_shapley_with, truncated_scan,
    ScanOptions,
};
pub use stratified::{stratified_shapley, Allocation};

/// Largest player count a [`Coalition`] can represent.
pub const MAX_PLAYERS: usize = 128;

/// A set of players, stored as a bitset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct Coalition(u128);

impl Coalition {
    pub const EMPTY: Coalition = Coalition(0);

    pub fn full(n: usize) -> Coalition {
        assert!(n <= MAX_PLAYERS);
        if n == MAX_PLAYERS {
            Coalition(u128::MAX)
        } else {
            Coalition((1u128 << n) - 1)
        }
    }

    pub fn from_bits(bits: u128) -> Coalition {
        Coalition(bits)
    }

    pub fn bits(self) -> u128 {
        self.0
    }

    pub fn with(self, player: usize) -> Coalition {
        Coalition(self.0 | (1u128 << player))
    }

    pub fn without(self, player: usize) -> Coalition {
        Coalition(self.0 & !(1u128 << player))
    }

    pub fn contains(self, player: usize) -> bool {
        self.0 >> player & 1 == 1
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Members in ascending order.
    pub fn members(self) -> impl Iterator<Item = usize> {
        let bits = self.0;
        (0..MAX_PLAYERS).filter(move |&i| bits >> i & 1 == 1)
    }
}

impl FromIterator<usize> for Coalition {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        iter.into_iter().fold(Coalition::EMPTY, Coalition::with)
    }
}

/// A transferable-utility game over players `0..player_count()`.
pub trait CoalitionGame {
    fn player_count(&self) -> usize;

    /// Utility of a coalition. Must be deterministic and defined for the
    /// empty coalition.
    fn value(&self, coalition: Coalition) -> f64;
}

impl<G: CoalitionGame + ?Sized> CoalitionGame for &G {
    fn player_count(&self) -> usize {
        (**self).player_count()
    }

    fn value(&self, coalition: Coalition) -> f64 {
        (**self).value(coalition)
    }
}

/// A game given by a closure.
pub struct FnGame<F> {
    players: usize,
    value: F,
}

impl<F: Fn(Coalition) -> f64> FnGame<F> {
    pub fn new(players: usize, value: F) -> Self {
        Self { players, value }
    }
}

impl<F: Fn(Coalition) -> f64> CoalitionGame for FnGame<F> {
    fn player_count(&self) -> usize {
        self.players
    }

    fn value(&self, coalition: Coalition) -> f64 {
        (self.value)(coalition)
    }
}

/// A game given by an explicit table indexed by the coalition bitmask.
#[derive(Debug, Clone)]
pub struct TableGame {
    players: usize,
    values: Vec<f64>,
}

impl TableGame {
    pub fn new(players: usize, values: Vec<f64>) -> Result<Self> {
        if players > 24 || values.len() != 1usize << players {
            return Err(Error::Argument(format!(
                "a table game over {players} players needs 2^{players} values, got {}",
                values.len()
            )));
        }
        Ok(Self { players, values })
    }

    /// Values drawn uniformly from `[0, 1)`.
    pub fn random(players: usize, rng: &mut impl Rng) -> Result<Self> {
        let values = (0..1usize << players).map(|_| rng.random::<f64>()).collect();
        Self::new(players, values)
    }
}

impl CoalitionGame for TableGame {
    fn player_count(&self) -> usize {
        self.players
    }

    fn value(&self, coalition: Coalition) -> f64 {
        self.values[coalition.bits() as usize]
    }
}

/// A join order of all players.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &p in &order {
            if p >= order.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Argument(format!("{order:?} is not a permutation")));
            }
        }
        Ok(Self(order))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn random(n: usize, rng: &mut impl Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self(order)
    }

    /// The same players in reverse order.
    pub fn reversed(&self) -> Self {
        Self(self.0.iter().rev().copied().collect())
    }

    pub fn order(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Advances to the next permutation in lexicographic order; returns
    /// `false` (leaving the order sorted) after the last one.
    pub fn advance(&mut self) -> bool {
        let v = &mut self.0;
        let Some(i) = (1..v.len()).rev().find(|&i| v[i - 1] < v[i]) else {
            v.reverse();
            return false;
        };
        let j = (i..v.len())
            .rev()
            .find(|&j| v[j] > v[i - 1])
            .expect("pivot has a successor");
        v.swap(i - 1, j);
        v[i..].reverse();
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvMethod {
    Exact,
    Mc,
    Antithetic,
    AntitheticTruncated,
    Stratified,
}

impl SvMethod {
    pub fn name(self) -> &'static str {
        match self {
            SvMethod::Exact => "exact",
            SvMethod::Mc => "mc",
            SvMethod::Antithetic => "antithetic",
            SvMethod::AntitheticTruncated => "antithetic_truncated",
            SvMethod::Stratified => "stratified",
        }
    }

    pub fn parse(s: &str) -> Option<SvMethod> {
        [
            SvMethod::Exact,
            SvMethod::Mc,
            SvMethod::Antithetic,
            SvMethod::AntitheticTruncated,
            SvMethod::Stratified,
        ]
        .into_iter()
        .find(|m| m.name() == s)
    }
}

/// Per-player Shapley values and how they were obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvEstimate {
    pub values: Vec<f64>,
    /// Permutations (or per-player stratified samples) drawn; `1` for exact.
    pub samples: usize,
    pub method: SvMethod,
}

fn check_players(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Argument("game has no players".into()));
    }
    if n > MAX_PLAYERS {
        return Err(Error::Capacity(format!(
            "{n} players exceed the {MAX_PLAYERS}-player bitset"
        )));
    }
    Ok(())
}
