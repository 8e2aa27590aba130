use super::{check_players, Coalition, CoalitionGame, SvEstimate, SvMethod};
use crate::error::{Error, Result};

/// Largest player count accepted by [`exact_shapley`].
pub const EXACT_MAX_PLAYERS: usize = 20;

/// Exact Shapley values by enumerating every coalition once:
/// `SV_i = sum over S not containing i of |S|!(N-|S|-1)!/N! * (v(S+i) - v(S))`.
pub fn exact_shapley<G: CoalitionGame + ?Sized>(game: &G) -> Result<SvEstimate> {
    let n = game.player_count();
    check_players(n)?;
    if n > EXACT_MAX_PLAYERS {
        return Err(Error::Capacity(format!(
            "exact Shapley enumerates 2^N coalitions; N = {n} exceeds {EXACT_MAX_PLAYERS}"
        )));
    }
    let table: Vec<f64> = (0..1u128 << n)
        .map(|bits| game.value(Coalition::from_bits(bits)))
        .collect();

    // weight[s] = s! (n-s-1)! / n! = 1 / (n * C(n-1, s))
    let mut weight = vec![0.0; n];
    let mut binom = 1.0f64;
    for (s, w) in weight.iter_mut().enumerate() {
        *w = 1.0 / (n as f64 * binom);
        binom = binom * (n - 1 - s) as f64 / (s + 1) as f64;
    }

    let mut values = vec![0.0; n];
    for (i, sv) in values.iter_mut().enumerate() {
        let bit = 1usize << i;
        let mut acc = 0.0;
        for s in 0..table.len() {
            if s & bit == 0 {
                acc += weight[s.count_ones() as usize] * (table[s | bit] - table[s]);
            }
        }
        *sv = acc;
    }
    Ok(SvEstimate {
        values,
        samples: 1,
        method: SvMethod::Exact,
    })
}
