//! Permutation-walk estimators.
//!
//! A scan walks a join order once and records each player's marginal
//! `v(prefix + i) - v(prefix)`. The empty-coalition value is computed once
//! per estimator call and shared by every scan.

use rayon::prelude::*;

use super::{check_players, Coalition, CoalitionGame, Permutation, SvEstimate, SvMethod};
use crate::error::{Error, Result};
use crate::seed;

/// Largest player count for full permutation enumeration.
pub const ENUMERATE_MAX_PLAYERS: usize = 10;

/// Scan modifiers shared by the permutation estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanOptions {
    /// Stop a scan once `|v(all) - v(prefix)| < tol_trunc`; the remaining
    /// players get marginal 0. Zero disables truncation.
    pub tol_trunc: f64,
    /// Walk only the first `d` positions of each permutation (later players
    /// get marginal 0). `None` walks the full permutation.
    pub scan_len: Option<usize>,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            tol_trunc: 0.0,
            scan_len: None,
        }
    }
}

impl ScanOptions {
    fn validate(&self, n: usize) -> Result<()> {
        if self.tol_trunc.is_nan() || self.tol_trunc < 0.0 {
            return Err(Error::Argument(format!("tol_trunc {} must be >= 0", self.tol_trunc)));
        }
        if let Some(d) = self.scan_len {
            if d == 0 || d > n {
                return Err(Error::Argument(format!("scan length {d} outside [1, {n}]")));
            }
        }
        Ok(())
    }
}

struct Walker {
    v_empty: f64,
    v_grand: Option<f64>,
    tol: f64,
    len: usize,
}

impl Walker {
    fn new<G: CoalitionGame + ?Sized>(game: &G, opts: &ScanOptions) -> Result<Self> {
        let n = game.player_count();
        check_players(n)?;
        opts.validate(n)?;
        let v_grand = (opts.tol_trunc > 0.0).then(|| game.value(Coalition::full(n)));
        Ok(Self {
            v_empty: game.value(Coalition::EMPTY),
            v_grand,
            tol: opts.tol_trunc,
            len: opts.scan_len.unwrap_or(n),
        })
    }

    fn scan<G: CoalitionGame + ?Sized>(&self, game: &G, perm: &Permutation) -> Vec<f64> {
        let mut marginals = vec![0.0; perm.len()];
        let mut prefix = Coalition::EMPTY;
        let mut prev = self.v_empty;
        for &player in &perm.order()[..self.len] {
            prefix = prefix.with(player);
            let v = game.value(prefix);
            marginals[player] = v - prev;
            prev = v;
            if let Some(grand) = self.v_grand {
                if (grand - v).abs() < self.tol {
                    break;
                }
            }
        }
        marginals
    }
}

/// Marginal contribution of every player along `perm`, with truncation.
pub fn truncated_scan<G: CoalitionGame + ?Sized>(game: &G, perm: &Permutation, tol_trunc: f64) -> Result<Vec<f64>> {
    if perm.len() != game.player_count() {
        return Err(Error::Argument(format!(
            "permutation of {} players for a {}-player game",
            perm.len(),
            game.player_count()
        )));
    }
    let walker = Walker::new(
        game,
        &ScanOptions {
            tol_trunc,
            scan_len: None,
        },
    )?;
    Ok(walker.scan(game, perm))
}

/// Scans permutations (possibly in parallel) and averages in index order.
fn average_scans<G: CoalitionGame + Sync + ?Sized>(game: &G, walker: &Walker, perms: &[Permutation]) -> Vec<f64> {
    let scans: Vec<Vec<f64>> = perms.par_iter().map(|p| walker.scan(game, p)).collect();
    let mut sum = vec![0.0; game.player_count()];
    for s in &scans {
        for (a, b) in sum.iter_mut().zip(s) {
            *a += b;
        }
    }
    let m = perms.len() as f64;
    sum.iter_mut().for_each(|v| *v /= m);
    sum
}

/// Plain Monte Carlo over `m` uniformly sampled permutations.
pub fn mc_shapley<G: CoalitionGame + Sync + ?Sized>(game: &G, m: usize, seed: u64) -> Result<SvEstimate> {
    mc_shapley_with(game, m, seed, &ScanOptions::default())
}

pub fn mc_shapley_with<G: CoalitionGame + Sync + ?Sized>(
    game: &G,
    m: usize,
    seed: u64,
    opts: &ScanOptions,
) -> Result<SvEstimate> {
    if m == 0 {
        return Err(Error::Argument("mc_shapley needs m >= 1".into()));
    }
    let walker = Walker::new(game, opts)?;
    let n = game.player_count();
    let mut rng = seed::rng(seed);
    let perms: Vec<Permutation> = (0..m).map(|_| Permutation::random(n, &mut rng)).collect();
    Ok(SvEstimate {
        values: average_scans(game, &walker, &perms),
        samples: m,
        method: SvMethod::Mc,
    })
}

/// Averages over all `N!` permutations; equals the exact Shapley value.
pub fn mc_shapley_enumerated<G: CoalitionGame + Sync + ?Sized>(game: &G) -> Result<SvEstimate> {
    let n = game.player_count();
    check_players(n)?;
    if n > ENUMERATE_MAX_PLAYERS {
        return Err(Error::Capacity(format!(
            "enumerating {n}! permutations exceeds the {ENUMERATE_MAX_PLAYERS}-player limit"
        )));
    }
    let walker = Walker::new(game, &ScanOptions::default())?;
    let mut perms = Vec::new();
    let mut p = Permutation::identity(n);
    loop {
        perms.push(p.clone());
        if !p.advance() {
            break;
        }
    }
    Ok(SvEstimate {
        values: average_scans(game, &walker, &perms),
        samples: perms.len(),
        method: SvMethod::Mc,
    })
}

/// Antithetic Monte Carlo: `m / 2` sampled permutations, each paired with
/// its reversal.
pub fn antithetic_shapley<G: CoalitionGame + Sync + ?Sized>(game: &G, m: usize, seed: u64) -> Result<SvEstimate> {
    antithetic_shapley_with(game, m, seed, &ScanOptions::default())
}

/// Antithetic sampling with scan options; with `tol_trunc > 0` this is the
/// truncated antithetic estimator.
pub fn antithetic_shapley_with<G: CoalitionGame + Sync + ?Sized>(
    game: &G,
    m: usize,
    seed: u64,
    opts: &ScanOptions,
) -> Result<SvEstimate> {
    if m == 0 || !m.is_multiple_of(2) {
        return Err(Error::Argument(format!(
            "antithetic sampling needs an even m >= 2, got {m}"
        )));
    }
    let walker = Walker::new(game, opts)?;
    let n = game.player_count();
    let mut rng = seed::rng(seed);
    let mut perms = Vec::with_capacity(m);
    for _ in 0..m / 2 {
        let p = Permutation::random(n, &mut rng);
        perms.push(p.reversed());
        perms.push(p);
    }
    Ok(SvEstimate {
        values: average_scans(game, &walker, &perms),
        samples: m,
        method: if opts.tol_trunc > 0.0 {
            SvMethod::AntitheticTruncated
        } else {
            SvMethod::Antithetic
        },
    })
}
