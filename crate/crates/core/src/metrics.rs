//! Detection and speed metrics: recall at a false-alarm rate, macro-recall,
//! and baseline-relative speed-ups.

use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};

/// Operating point picked by [`recall_at_far`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub recall: f64,
    #[serde(with = "crate::logjson::value")]
    pub threshold: f64,
    pub false_alarms: usize,
    pub far_per_hour: f64,
}

fn count_at_or_above(sorted_desc: &[f64], threshold: f64) -> usize {
    sorted_desc.partition_point(|&s| s >= threshold)
}

fn sorted_desc(values: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|s| !s.is_nan()).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Recall of the positives at the loosest threshold whose false-alarm rate on
/// the negatives stays within `target_far` events per hour.
///
/// Candidate thresholds are every finite observed score plus `+inf`; the
/// smallest admissible one wins. A positive is detected when its score is at
/// or above the threshold.
pub fn recall_at_far(
    pos_scores: &[f64],
    neg_events: &[f64],
    neg_hours: f64,
    target_far: f64,
) -> Result<OperatingPoint> {
    if pos_scores.is_empty() {
        return Err(KwsError::validation(
            "recall needs at least one positive score",
        ));
    }
    if target_far.is_nan() || target_far < 0.0 {
        return Err(KwsError::validation(format!(
            "target FAR must be >= 0, got {target_far}"
        )));
    }
    if !(neg_hours.is_finite() && neg_hours > 0.0) {
        return Err(KwsError::validation(format!(
            "negative audio duration must be > 0 hours, got {neg_hours}"
        )));
    }
    let negs = sorted_desc(neg_events);
    let pos = sorted_desc(pos_scores);

    let mut candidates: Vec<f64> = pos
        .iter()
        .chain(negs.iter())
        .copied()
        .filter(|s| s.is_finite())
        .collect();
    candidates.push(f64::INFINITY);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    // FA count is non-increasing in the threshold, so the admissible set is
    // a suffix of the ascending candidates.
    let first_ok = candidates
        .partition_point(|&c| count_at_or_above(&negs, c) as f64 / neg_hours > target_far);
    let threshold = candidates[first_ok];
    let false_alarms = count_at_or_above(&negs, threshold);
    Ok(OperatingPoint {
        recall: count_at_or_above(&pos, threshold) as f64 / pos_scores.len() as f64,
        threshold,
        false_alarms,
        far_per_hour: false_alarms as f64 / neg_hours,
    })
}

/// One point of a detection-error tradeoff sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    #[serde(with = "crate::logjson::value")]
    pub threshold: f64,
    pub far_per_hour: f64,
    pub recall: f64,
}

/// Recall and FAR at every candidate threshold, ascending.
pub fn threshold_sweep(pos_scores: &[f64], neg_events: &[f64], neg_hours: f64) -> Vec<SweepPoint> {
    let negs = sorted_desc(neg_events);
    let pos = sorted_desc(pos_scores);
    let mut candidates: Vec<f64> = pos
        .iter()
        .chain(negs.iter())
        .copied()
        .filter(|s| s.is_finite())
        .collect();
    candidates.push(f64::INFINITY);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates
        .into_iter()
        .map(|threshold| SweepPoint {
            threshold,
            far_per_hour: count_at_or_above(&negs, threshold) as f64 / neg_hours,
            recall: if pos.is_empty() {
                0.0
            } else {
                count_at_or_above(&pos, threshold) as f64 / pos.len() as f64
            },
        })
        .collect()
}

pub fn macro_recall(per_keyword: &[f64]) -> Result<f64> {
    if per_keyword.is_empty() {
        return Err(KwsError::validation(
            "macro-recall needs at least one keyword",
        ));
    }
    Ok(per_keyword.iter().sum::<f64>() / per_keyword.len() as f64)
}

/// Local score maxima at least `window + 1` frames apart, strongest first
/// claimed. These are the events a detector would emit with the threshold
/// set just below each of them, so FA counts can be taken at any threshold.
///
/// `scores` is indexed by frame from 1; non-finite entries never peak.
pub fn peak_events(scores: &[f64], window: usize) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..scores.len())
        .filter(|&i| scores[i].is_finite())
        .collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut taken: Vec<usize> = Vec::new();
    for i in order {
        if taken.iter().all(|&j| i.abs_diff(j) > window) {
            taken.push(i);
        }
    }
    taken.sort_unstable();
    taken.into_iter().map(|i| (i + 1, scores[i])).collect()
}

/// Work and time spent decoding a set of utterances.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeedCounters {
    pub columns_evaluated: u64,
    pub oracle_queries: u64,
    /// Time inside the DP kernel only.
    pub search_wall_seconds: f64,
    /// End to end, including oracle fetches and file IO.
    pub total_wall_seconds: f64,
}

impl SpeedCounters {
    pub fn add(&mut self, other: &SpeedCounters) {
        self.columns_evaluated += other.columns_evaluated;
        self.oracle_queries += other.oracle_queries;
        self.search_wall_seconds += other.search_wall_seconds;
        self.total_wall_seconds += other.total_wall_seconds;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub rel_search: f64,
    pub rel_running: f64,
    /// Baseline columns over candidate columns; free of timer noise.
    pub column_ratio: f64,
}

pub fn speedup(baseline: &SpeedCounters, candidate: &SpeedCounters) -> Result<Speedup> {
    let positive = |x: f64| x > 0.0;
    if !positive(candidate.search_wall_seconds) || !positive(candidate.total_wall_seconds) {
        return Err(KwsError::validation(
            "candidate timings must be > 0 to form a speed-up",
        ));
    }
    if candidate.columns_evaluated == 0 {
        return Err(KwsError::validation("candidate evaluated no columns"));
    }
    Ok(Speedup {
        rel_search: baseline.search_wall_seconds / candidate.search_wall_seconds,
        rel_running: baseline.total_wall_seconds / candidate.total_wall_seconds,
        column_ratio: baseline.columns_evaluated as f64 / candidate.columns_evaluated as f64,
    })
}
