//! Frame-level, visit-level and conversion metrics.
//!
//! Frame accuracy counts correct votes among tau-retained frames of
//! labeled visits; visit accuracy counts correct identities among assigned
//! labeled visits; conversion is the assigned fraction of all visits.
//! Empty denominators report `None`, never 0 or 1.

use serde::{Deserialize, Serialize};

use crate::consensus::ConsensusResult;
use crate::stream::ClassId;

/// A consensus result paired with the visit's ground-truth label, the unit
/// of metric aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledResult {
    pub result: ConsensusResult,
    pub true_label: Option<ClassId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Fraction of correct high-confidence frames; `None` when no labeled
    /// visit retained a frame.
    pub frame_accuracy: Option<f64>,
    /// Fraction of correct assigned labeled visits; `None` when nothing
    /// was assigned.
    pub visit_accuracy: Option<f64>,
    /// Assigned visits over all visits; `None` when there are no visits.
    pub conversion: Option<f64>,
    pub confident_frames: usize,
    pub assigned_visits: usize,
    pub total_visits: usize,
}

/// Correct votes among tau-retained frames of labeled visits.
pub fn frame_accuracy(outcomes: &[LabeledResult]) -> Option<f64> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for o in outcomes {
        let Some(y) = o.true_label else { continue };
        total += o.result.valid_count();
        correct += o.result.counts.get(&y).copied().unwrap_or(0);
    }
    (total > 0).then(|| correct as f64 / total as f64)
}

/// Correct identities among assigned labeled visits.
pub fn visit_accuracy(outcomes: &[LabeledResult]) -> Option<f64> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for o in outcomes {
        let (Some(y), Some(c)) = (o.true_label, o.result.assignment.class()) else {
            continue;
        };
        total += 1;
        if c == y {
            correct += 1;
        }
    }
    (total > 0).then(|| correct as f64 / total as f64)
}

/// Assigned visits over all visits, labeled or not.
pub fn conversion_rate(results: &[ConsensusResult]) -> Option<f64> {
    if results.is_empty() {
        return None;
    }
    let assigned = results.iter().filter(|r| r.assignment.is_assigned()).count();
    Some(assigned as f64 / results.len() as f64)
}

pub fn metrics_report(outcomes: &[LabeledResult]) -> MetricsReport {
    let results: Vec<ConsensusResult> = outcomes.iter().map(|o| o.result.clone()).collect();
    let confident_frames = outcomes
        .iter()
        .filter(|o| o.true_label.is_some())
        .map(|o| o.result.valid_count())
        .sum();
    let assigned_visits = results.iter().filter(|r| r.assignment.is_assigned()).count();
    MetricsReport {
        frame_accuracy: frame_accuracy(outcomes),
        visit_accuracy: visit_accuracy(outcomes),
        conversion: conversion_rate(&results),
        confident_frames,
        assigned_visits,
        total_visits: results.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::{visit_consensus, ConsensusConfig};

    fn outcome(votes: &[(ClassId, usize)], label: Option<ClassId>, id: &str) -> LabeledResult {
        let mut v = Vec::new();
        let mut i = 0;
        for &(c, n) in votes {
            for _ in 0..n {
                v.push((i, c));
                i += 1;
            }
        }
        LabeledResult {
            result: visit_consensus(id, v, &ConsensusConfig::default()),
            true_label: label,
        }
    }

    #[test]
    fn frame_accuracy_counts() {
        let o = vec![outcome(&[(0, 9), (1, 1)], Some(0), "a")];
        assert_eq!(frame_accuracy(&o), Some(0.9));
        let perfect = vec![outcome(&[(0, 10)], Some(0), "a")];
        assert_eq!(frame_accuracy(&perfect), Some(1.0));
    }

    #[test]
    fn frame_accuracy_undefined_without_confident_frames() {
        let o = vec![outcome(&[], Some(0), "a")];
        assert_eq!(frame_accuracy(&o), None);
    }

    #[test]
    fn visit_accuracy_over_assigned_only() {
        let o = vec![
            outcome(&[(0, 12)], Some(0), "a"),       // assigned, correct
            outcome(&[(1, 20), (0, 7)], Some(0), "b"), // assigned, wrong
            outcome(&[(0, 4)], Some(0), "c"),        // abstains, excluded
        ];
        assert_eq!(visit_accuracy(&o), Some(0.5));
    }

    #[test]
    fn visit_accuracy_undefined_without_assignments() {
        let o = vec![outcome(&[(0, 4)], Some(0), "a")];
        assert_eq!(visit_accuracy(&o), None);
    }

    #[test]
    fn conversion_counts_abstentions() {
        let results: Vec<ConsensusResult> = vec![
            outcome(&[(0, 12)], None, "a").result,
            outcome(&[(0, 4)], None, "b").result,
        ];
        assert_eq!(conversion_rate(&results), Some(0.5));
        assert_eq!(conversion_rate(&[]), None);
    }

    #[test]
    fn unlabeled_visits_count_for_conversion_not_accuracy() {
        let o = vec![
            outcome(&[(0, 12)], None, "a"),
            outcome(&[(1, 12)], Some(1), "b"),
        ];
        let report = metrics_report(&o);
        assert_eq!(report.visit_accuracy, Some(1.0));
        assert_eq!(report.conversion, Some(1.0));
        assert_eq!(report.total_visits, 2);
        // only the labeled visit's frames feed frame accuracy
        assert_eq!(report.confident_frames, 12);
    }
}
