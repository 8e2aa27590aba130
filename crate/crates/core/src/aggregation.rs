//! Server-side aggregation rules.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::params::ParamVector;

/// Which aggregation rule the server applies to all updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AggregatorSpec {
    FedAvg,
    TrimmedMean { trim: usize },
    CoordMedian,
    MultiKrum { byzantine: usize, selection_size: usize },
}

fn check_dims(updates: &[ParamVector]) -> Result<usize> {
    let first = updates.first().ok_or(Error::EmptySelection)?;
    for u in &updates[1..] {
        ensure_len(first.len(), u.len())?;
    }
    Ok(first.len())
}

/// `sum_k (n_k / sum n) w_k` over `members` (ascending order is the caller's
/// responsibility; the sum is taken in the given order).
pub fn fedavg_subset(updates: &[ParamVector], weights: &[f64], members: &[usize]) -> Result<ParamVector> {
    ensure_len(updates.len(), weights.len())?;
    let first = *members.first().ok_or(Error::EmptySelection)?;
    let dim = updates[first].len();
    let mut total = 0.0;
    for &k in members {
        let w = *weights
            .get(k)
            .ok_or_else(|| Error::Argument(format!("client {k} out of range")))?;
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::Argument(format!("weight {w} of client {k} must be positive")));
        }
        ensure_len(dim, updates[k].len())?;
        total += w;
    }
    let mut out = ParamVector::zeros(dim);
    for &k in members {
        out.axpy(weights[k] / total, &updates[k])?;
    }
    Ok(out)
}

/// Sample-count weighted mean of all updates.
pub fn fedavg(updates: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let members: Vec<usize> = (0..updates.len()).collect();
    fedavg_subset(updates, weights, &members)
}

fn mean(updates: &[&ParamVector]) -> ParamVector {
    let mut out = ParamVector::zeros(updates[0].len());
    let inv = 1.0 / updates.len() as f64;
    for u in updates {
        out.axpy(inv, u).expect("dimensions checked");
    }
    out
}

fn per_coordinate(updates: &[ParamVector], f: impl Fn(&mut [f64]) -> f64) -> Result<ParamVector> {
    let dim = check_dims(updates)?;
    let mut column = vec![0.0; updates.len()];
    let out = (0..dim)
        .map(|j| {
            for (c, u) in column.iter_mut().zip(updates) {
                *c = u[j];
            }
            column.sort_by(f64::total_cmp);
            f(&mut column)
        })
        .collect();
    Ok(ParamVector::new(out))
}

/// Coordinate-wise median; the two middle values are averaged for even counts.
pub fn coord_median(updates: &[ParamVector]) -> Result<ParamVector> {
    per_coordinate(updates, |sorted| {
        let n = sorted.len();
        if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        }
    })
}

/// Coordinate-wise mean after dropping the `trim` smallest and `trim`
/// largest values.
pub fn trimmed_mean(updates: &[ParamVector], trim: usize) -> Result<ParamVector> {
    if 2 * trim >= updates.len() && !updates.is_empty() {
        return Err(Error::Argument(format!(
            "trimming {trim} from each end of {} updates leaves nothing",
            updates.len()
        )));
    }
    per_coordinate(updates, |sorted| {
        let kept = &sorted[trim..sorted.len() - trim];
        kept.iter().sum::<f64>() / kept.len() as f64
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrumOutcome {
    pub aggregate: ParamVector,
    /// Selected client indices, ascending.
    pub selected: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Multi-Krum: score each update by the summed squared distance to its
/// `N - f - 2` nearest neighbours, keep the `selection_size` lowest scores
/// (ties to the lower index) and average them without weights.
pub fn multi_krum(updates: &[ParamVector], byzantine: usize, selection_size: usize) -> Result<KrumOutcome> {
    check_dims(updates)?;
    let n = updates.len();
    if n < byzantine + 3 {
        return Err(Error::Argument(format!(
            "multi-krum needs N - f - 2 >= 1 (N = {n}, f = {byzantine})"
        )));
    }
    if selection_size == 0 || selection_size > n {
        return Err(Error::Argument(format!(
            "selection size {selection_size} outside [1, {n}]"
        )));
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = updates[i].squared_distance(&updates[j])?;
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let neighbours = n - byzantine - 2;
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i * n + j]).collect();
            row.sort_by(f64::total_cmp);
            row[..neighbours].iter().sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut selected = order[..selection_size].to_vec();
    selected.sort_unstable();
    let chosen: Vec<&ParamVector> = selected.iter().map(|&i| &updates[i]).collect();
    Ok(KrumOutcome {
        aggregate: mean(&chosen),
        selected,
        scores,
    })
}

/// Applies `spec` to all updates; returns the aggregate and the ids that
/// contributed to it.
pub fn aggregate(spec: &AggregatorSpec, updates: &[ParamVector], weights: &[f64]) -> Result<(ParamVector, Vec<usize>)> {
    let all: Vec<usize> = (0..updates.len()).collect();
    match *spec {
        AggregatorSpec::FedAvg => Ok((fedavg(updates, weights)?, all)),
        AggregatorSpec::TrimmedMean { trim } => Ok((trimmed_mean(updates, trim)?, all)),
        AggregatorSpec::CoordMedian => Ok((coord_median(updates)?, all)),
        AggregatorSpec::MultiKrum {
            byzantine,
            selection_size,
        } => {
            let out = multi_krum(updates, byzantine, selection_size)?;
            Ok((out.aggregate, out.selected))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(rows: &[&[f64]]) -> Vec<ParamVector> {
        rows.iter().map(|r| ParamVector::new(r.to_vec())).collect()
    }

    #[test]
    fn fedavg_examples() {
        let u = pv(&[&[0.0, 0.0], &[4.0, 8.0]]);
        assert_eq!(fedavg(&u, &[1.0, 3.0]).unwrap().as_slice(), &[3.0, 6.0]);
        let one = pv(&[&[1.5, -2.0]]);
        assert_eq!(fedavg(&one, &[7.0]).unwrap(), one[0]);
        assert!(matches!(fedavg(&[], &[]), Err(Error::EmptySelection)));
        assert!(fedavg(&u, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn fedavg_equal_weights_matches_scalar_loop() {
        let u = pv(&[&[0.1, 2.0, -3.0], &[0.7, 5.5, 1.0], &[-0.2, 0.25, 9.0]]);
        let got = fedavg(&u, &[2.0, 2.0, 2.0]).unwrap();
        for j in 0..3 {
            let mut s = 0.0;
            for k in 0..3 {
                s += u[k][j];
            }
            assert!((got[j] - s / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn subset_mean_of_two_of_four() {
        let u = pv(&[&[1.0], &[10.0], &[100.0], &[1000.0]]);
        let got = fedavg_subset(&u, &[1.0, 2.0, 3.0, 4.0], &[1, 3]).unwrap();
        assert!((got[0] - (2.0 * 10.0 + 4.0 * 1000.0) / 6.0).abs() < 1e-9);
    }

    #[test]
    fn median_examples() {
        let u = pv(&[&[1.0, 5.0], &[2.0, 6.0], &[9.0, 0.0]]);
        assert_eq!(coord_median(&u).unwrap().as_slice(), &[2.0, 5.0]);
        let even = pv(&[&[0.0], &[1.0], &[2.0], &[100.0]]);
        assert_eq!(coord_median(&even).unwrap().as_slice(), &[1.5]);
        let same = pv(&[&[3.0, 4.0], &[3.0, 4.0]]);
        assert_eq!(coord_median(&same).unwrap(), same[0]);
    }

    #[test]
    fn trimmed_mean_examples() {
        assert_eq!(
            trimmed_mean(&pv(&[&[1.0], &[2.0], &[9.0]]), 1).unwrap().as_slice(),
            &[2.0]
        );
        let u = pv(&[&[1.0, 0.0], &[2.0, 5.0], &[9.0, 6.0]]);
        assert_eq!(trimmed_mean(&u, 1).unwrap().as_slice(), &[2.0, 5.0]);
        assert_eq!(trimmed_mean(&u, 0).unwrap().as_slice(), &[4.0, 11.0 / 3.0]);
        assert!(matches!(trimmed_mean(&u, 2), Err(Error::Argument(_))));
    }

    #[test]
    fn krum_example() {
        let u = pv(&[&[0.0], &[0.1], &[0.2], &[10.0]]);
        let out = multi_krum(&u, 1, 3).unwrap();
        let expected = [0.01, 0.01, 0.01, 96.04];
        for (s, e) in out.scores.iter().zip(expected) {
            assert!((s - e).abs() < 1e-12);
        }
        assert_eq!(out.selected, vec![0, 1, 2]);
        assert!((out.aggregate[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn krum_edge_cases() {
        let same = pv(&[&[2.0, 1.0][..]; 5]);
        assert_eq!(multi_krum(&same, 1, 2).unwrap().aggregate, same[0]);
        let u = pv(&[&[0.0], &[1.0], &[2.0], &[5.0]]);
        let all = multi_krum(&u, 0, 4).unwrap();
        assert_eq!(all.selected, vec![0, 1, 2, 3]);
        assert_eq!(all.aggregate[0], 2.0);
        assert!(multi_krum(&u, 2, 2).is_err());
        assert!(multi_krum(&u, 0, 5).is_err());
    }

    fn updates_strategy() -> impl Strategy<Value = Vec<ParamVector>> {
        (3usize..8).prop_flat_map(|n| {
            prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), n)
                .prop_map(|rows| rows.into_iter().map(ParamVector::new).collect())
        })
    }

    fn within_hull(out: &ParamVector, inputs: &[ParamVector]) -> bool {
        (0..out.len()).all(|j| {
            let lo = inputs.iter().map(|u| u[j]).fold(f64::INFINITY, f64::min);
            let hi = inputs.iter().map(|u| u[j]).fold(f64::NEG_INFINITY, f64::max);
            out[j] >= lo - 1e-9 && out[j] <= hi + 1e-9
        })
    }

    proptest! {
        #[test]
        fn outputs_stay_within_coordinate_range(u in updates_strategy(), seed in 0u64..1000) {
            let weights: Vec<f64> = (0..u.len()).map(|k| 1.0 + ((seed + k as u64) % 5) as f64).collect();
            prop_assert!(within_hull(&fedavg(&u, &weights).unwrap(), &u));
            prop_assert!(within_hull(&coord_median(&u).unwrap(), &u));
            prop_assert!(within_hull(&trimmed_mean(&u, 1).unwrap(), &u));
            let k = multi_krum(&u, 0, 2).unwrap();
            let chosen: Vec<ParamVector> = k.selected.iter().map(|&i| u[i].clone()).collect();
            prop_assert!(within_hull(&k.aggregate, &chosen));
        }

        #[test]
        fn rules_are_permutation_invariant(u in updates_strategy(), rot in 1usize..7) {
            let n = u.len();
            let mut r = u.clone();
            r.rotate_left(rot % n);
            let close = |a: &ParamVector, b: &ParamVector| a.l2_distance(b).unwrap() < 1e-9;
            let ones = vec![1.0; n];
            prop_assert!(close(&fedavg(&u, &ones).unwrap(), &fedavg(&r, &ones).unwrap()));
            prop_assert_eq!(coord_median(&u).unwrap(), coord_median(&r).unwrap());
            prop_assert!(close(&trimmed_mean(&u, 1).unwrap(), &trimmed_mean(&r, 1).unwrap()));
            let a = multi_krum(&u, 0, 2).unwrap();
            let b = multi_krum(&r, 0, 2).unwrap();
            // Selection is equivariant: map rotated ids back to original ids.
            let mut mapped: Vec<usize> = b.selected.iter().map(|&i| (i + rot % n) % n).collect();
            mapped.sort_unstable();
            let scores_distinct = {
                let mut s = a.scores.clone();
                s.sort_by(f64::total_cmp);
                s.windows(2).all(|w| w[1] - w[0] > 1e-9)
            };
            if scores_distinct {
                prop_assert_eq!(mapped, a.selected);
            }
        }

        #[test]
        fn odd_median_picks_an_input_value(u in updates_strategy()) {
            prop_assume!(u.len() % 2 == 1);
            let m = coord_median(&u).unwrap();
            for j in 0..m.len() {
                prop_assert!(u.iter().any(|x| x[j] == m[j]));
            }
        }

        #[test]
        fn untrimmed_mean_is_equal_weight_fedavg(u in updates_strategy()) {
            let a = trimmed_mean(&u, 0).unwrap();
            let b = fedavg(&u, &vec![1.0; u.len()]).unwrap();
            prop_assert!(a.l2_distance(&b).unwrap() < 1e-12);
        }
    }
}
