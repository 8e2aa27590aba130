//! Position-stratified sampling.
//!
//! For player `i`, stratum `l` holds the orders that place `i` at position
//! `l`; a draw from it is a uniformly random set of `l` other players as the
//! prefix. Positions are equiprobable under uniform orders, so the per-stratum
//! means are combined with equal weights `1/N`.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_players, Coalition, CoalitionGame, SvEstimate, SvMethod};
use crate::error::{Error, Result};
use crate::seed;

/// How a player's budget of `m` samples is spread over the `N` strata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    /// `floor(m / N)` per stratum, remainder to the lowest positions.
    #[default]
    Uniform,
    /// A pilot pass of `max(1, m / 2N)` draws per stratum estimates each
    /// stratum's range; the rest of the budget is split proportionally to it.
    ProportionalToRange,
}

fn uniform_split(total: usize, strata: usize) -> Vec<usize> {
    (0..strata)
        .map(|l| total / strata + usize::from(l < total % strata))
        .collect()
}

/// Largest-remainder apportionment of `total` by `weights` (ties to low index).
fn proportional_split(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum.is_nan() || sum <= 0.0 {
        return uniform_split(total, weights.len());
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &l in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[l] += 1;
        left -= 1;
    }
    counts
}

struct Stratum {
    sum: f64,
    count: usize,
    min: f64,
    max: f64,
}

impl Stratum {
    fn new() -> Self {
        Self {
            sum: 0.0,
            count: 0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }

    fn push(&mut self, f: f64) {
        self.sum += f;
        self.count += 1;
        self.min = self.min.min(f);
        self.max = self.max.max(f);
    }

    fn range(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.max - self.min
        }
    }
}

/// Stratified estimate with `m` samples per player.
pub fn stratified_shapley<G: CoalitionGame + Sync + ?Sized>(
    game: &G,
    m: usize,
    allocation: Allocation,
    seed: u64,
) -> Result<SvEstimate> {
    let n = game.player_count();
    check_players(n)?;
    if m < n {
        return Err(Error::Argument(format!(
            "stratified sampling needs m >= {n} (one draw per position), got {m}"
        )));
    }
    let values = (0..n)
        .into_par_iter()
        .map(|player| estimate_player(game, player, m, allocation, seed))
        .collect();
    Ok(SvEstimate {
        values,
        samples: m,
        method: SvMethod::Stratified,
    })
}

fn estimate_player<G: CoalitionGame + ?Sized>(
    game: &G,
    player: usize,
    m: usize,
    allocation: Allocation,
    seed: u64,
) -> f64 {
    let n = game.player_count();
    let others: Vec<usize> = (0..n).filter(|&j| j != player).collect();
    let mut rng = seed::stream_rng(seed, "stratum", &[player as u64]);
    let mut strata: Vec<Stratum> = (0..n).map(|_| Stratum::new()).collect();

    let mut draw = |position: usize, stratum: &mut Stratum| {
        let prefix: Coalition = index::sample(&mut rng, others.len(), position)
            .into_iter()
            .map(|k| others[k])
            .collect();
        stratum.push(game.value(prefix.with(player)) - game.value(prefix));
    };

    let counts = match allocation {
        Allocation::Uniform => uniform_split(m, n),
        Allocation::ProportionalToRange => {
            let pilot = (m / (2 * n)).max(1);
            for (l, s) in strata.iter_mut().enumerate() {
                for _ in 0..pilot {
                    draw(l, s);
                }
            }
            let ranges: Vec<f64> = strata.iter().map(Stratum::range).collect();
            proportional_split(m - pilot * n, &ranges)
        }
    };
    for (l, (s, &k)) in strata.iter_mut().zip(&counts).enumerate() {
        for _ in 0..k {
            draw(l, s);
        }
    }
    strata.iter().map(|s| s.sum / s.count as f64).sum::<f64>() / n as f64
}
