use serde::{Deserialize, Serialize};

use super::RunSummary;
use crate::error::{Error, Result};

/// Exclusion quality of a FedSV run against the true malicious set.
///
/// Precision and recall are pooled over every evaluated SV round: each
/// (round, client) exclusion decision counts once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub precision: f64,
    pub recall: f64,
    /// First round from which every later SV round excludes all malicious
    /// clients; `None` means never.
    pub rounds_to_full_exclusion: Option<usize>,
    /// Honest clients excluded, summed over evaluated rounds.
    pub false_exclusions: usize,
    pub rounds_evaluated: usize,
}

/// Detection statistics over all SV rounds.
pub fn detection_report(summary: &RunSummary, malicious: &[usize]) -> Result<DetectionReport> {
    detection_report_from(summary, malicious, 1)
}

/// Detection statistics over SV rounds `>= from_round`.
/// `rounds_to_full_exclusion` always considers the whole run.
pub fn detection_report_from(summary: &RunSummary, malicious: &[usize], from_round: usize) -> Result<DetectionReport> {
    if !summary.is_fedsv() {
        return Err(Error::NotApplicable(format!(
            "detection needs a fedsv run, got {}",
            summary.defense
        )));
    }
    let rounds = summary
        .records
        .iter()
        .filter(|r| r.sv.is_some())
        .map(|r| (r.round, r.excluded(summary.clients)));
    detection_from_rounds(rounds, malicious, from_round)
}

/// Detection statistics from `(round, excluded ids)` pairs of SV rounds in
/// ascending round order.
pub fn detection_from_rounds(
    rounds: impl IntoIterator<Item = (usize, Vec<usize>)>,
    malicious: &[usize],
    from_round: usize,
) -> Result<DetectionReport> {
    let (mut tp, mut fp, mut fneg, mut evaluated) = (0usize, 0usize, 0usize, 0usize);
    let mut full_since: Option<usize> = None;
    let mut last_round = 0;
    for (round, excluded) in rounds {
        if round <= last_round {
            return Err(Error::Argument("detection rounds must be strictly increasing".into()));
        }
        last_round = round;
        let all_out = malicious.iter().all(|m| excluded.contains(m));
        full_since = match (all_out, full_since) {
            (true, None) => Some(round),
            (true, since) => since,
            (false, _) => None,
        };
        if round < from_round {
            continue;
        }
        evaluated += 1;
        let hit = excluded.iter().filter(|c| malicious.contains(c)).count();
        tp += hit;
        fp += excluded.len() - hit;
        fneg += malicious.len() - hit;
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(DetectionReport {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
        rounds_to_full_exclusion: full_since,
        false_exclusions: fp,
        rounds_evaluated: evaluated,
    })
}
