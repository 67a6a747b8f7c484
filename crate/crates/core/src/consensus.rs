//! Confidence filtering and visit-level majority consensus.
//!
//! Frames whose max posterior clears tau vote for their argmax class. A
//! visit receives an identity only when it has at least `min_frames` valid
//! frames, a unique majority, and consensus strength rho at or above
//! gamma; otherwise it abstains with a reason.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classifier::{ModelError, ModelParams, ProbVector};
use crate::scalar::Real;
use crate::stream::{ClassId, Visit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsensusConfig {
    /// Minimum max-posterior for a frame to count (inclusive).
    pub tau: f64,
    /// Minimum number of valid frames per visit.
    pub min_frames: usize,
    /// Minimum consensus strength (inclusive).
    pub gamma: f64,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            tau: 0.99,
            min_frames: 10,
            gamma: 0.50,
        }
    }
}

impl ConsensusConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(format!("tau must be in (0, 1], got {}", self.tau));
        }
        if self.min_frames < 1 {
            return Err("min_frames must be >= 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbstainReason {
    TooFewFrames,
    Tie,
    LowConsensus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Assignment {
    Assigned { class: ClassId },
    Abstain { reason: AbstainReason },
}

impl Assignment {
    pub fn class(&self) -> Option<ClassId> {
        match self {
            Assignment::Assigned { class } => Some(*class),
            Assignment::Abstain { .. } => None,
        }
    }

    pub fn is_assigned(&self) -> bool {
        matches!(self, Assignment::Assigned { .. })
    }
}

/// Per-visit consensus outcome; one JSON line of the consensus report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusResult {
    pub visit_id: String,
    /// tau-filtered frames: (frame index within the visit, voted class).
    pub valid: Vec<(usize, ClassId)>,
    /// Votes per class.
    pub counts: BTreeMap<ClassId, usize>,
    /// Majority class; `None` when no valid frames.
    pub majority: Option<ClassId>,
    /// Consensus strength n(majority) / M; `None` when no valid frames.
    pub rho: Option<f64>,
    pub assignment: Assignment,
}

impl ConsensusResult {
    /// M: the number of valid frames.
    pub fn valid_count(&self) -> usize {
        self.valid.len()
    }
}

/// Keep frames whose max posterior is at least tau (inclusive) and map
/// them to their argmax vote. Argmax ties break to the lowest class index.
pub fn filter_confident<R: Real>(preds: &[ProbVector<R>], tau: R) -> Vec<(usize, ClassId)> {
    preds
        .iter()
        .enumerate()
        .filter(|(_, p)| p.max_prob() >= tau)
        .map(|(i, p)| (i, p.argmax()))
        .collect()
}

/// Aggregate filtered votes into the gated visit identity.
pub fn visit_consensus(
    visit_id: &str,
    valid: Vec<(usize, ClassId)>,
    cfg: &ConsensusConfig,
) -> ConsensusResult {
    let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    for (_, c) in &valid {
        *counts.entry(*c).or_insert(0) += 1;
    }
    let m = valid.len();
    let top = counts.iter().map(|(&c, &n)| (n, c)).max_by(|a, b| {
        // highest count wins; count ties resolve to the lowest class index
        a.0.cmp(&b.0).then(b.1.cmp(&a.1))
    });
    let majority = top.map(|(_, c)| c);
    let rho = top.map(|(n, _)| n as f64 / m as f64);
    let unique = top.is_some_and(|(n, c)| {
        counts.iter().all(|(&oc, &on)| oc == c || on < n)
    });

    // abstain priority: too few frames, then tie, then weak consensus
    let assignment = if m < cfg.min_frames {
        Assignment::Abstain {
            reason: AbstainReason::TooFewFrames,
        }
    } else if !unique {
        Assignment::Abstain {
            reason: AbstainReason::Tie,
        }
    } else if rho.expect("m >= min_frames >= 1") < cfg.gamma {
        Assignment::Abstain {
            reason: AbstainReason::LowConsensus,
        }
    } else {
        Assignment::Assigned {
            class: majority.expect("m > 0"),
        }
    };

    ConsensusResult {
        visit_id: visit_id.to_string(),
        valid,
        counts,
        majority,
        rho,
        assignment,
    }
}

/// Classify every frame of a visit, filter by confidence, and vote.
pub fn classify_visit(
    visit: &Visit,
    params: &ModelParams<f64>,
    cfg: &ConsensusConfig,
) -> Result<ConsensusResult, ModelError> {
    let preds = visit
        .frames
        .iter()
        .map(|f| params.forward(&f.cloud))
        .collect::<Result<Vec<_>, _>>()?;
    let valid = filter_confident(&preds, cfg.tau);
    Ok(visit_consensus(&visit.visit_id, valid, cfg))
}

/// Write one JSON line per result.
pub fn write_report(results: &[ConsensusResult], mut writer: impl std::io::Write) -> std::io::Result<()> {
    for r in results {
        serde_json::to_writer(&mut writer, r)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        writeln!(writer)?;
    }
    Ok(())
}

pub fn read_report(reader: impl std::io::BufRead) -> std::io::Result<Vec<ConsensusResult>> {
    let mut results = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        results.push(
            serde_json::from_str(&line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?,
        );
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(probs: &[f64]) -> ProbVector<f64> {
        ProbVector {
            probs: probs.to_vec(),
        }
    }

    #[test]
    fn filter_threshold_inclusive() {
        let preds = vec![pv(&[0.995, 0.005]), pv(&[0.5, 0.5]), pv(&[0.99, 0.01])];
        let valid = filter_confident(&preds, 0.99);
        assert_eq!(valid, vec![(0, 0), (2, 0)]);
    }

    #[test]
    fn filter_argmax_tie_breaks_low() {
        let preds = vec![pv(&[0.5, 0.5])];
        let valid = filter_confident(&preds, 0.5);
        assert_eq!(valid, vec![(0, 0)]);
    }

    fn votes(spec: &[(ClassId, usize)]) -> Vec<(usize, ClassId)> {
        let mut out = Vec::new();
        let mut i = 0;
        for &(c, n) in spec {
            for _ in 0..n {
                out.push((i, c));
                i += 1;
            }
        }
        out
    }

    #[test]
    fn majority_assigned() {
        let cfg = ConsensusConfig::default();
        let r = visit_consensus("v", votes(&[(0, 7), (1, 5)]), &cfg);
        assert_eq!(r.valid_count(), 12);
        assert_eq!(r.majority, Some(0));
        assert!((r.rho.unwrap() - 7.0 / 12.0).abs() < 1e-12);
        assert_eq!(r.assignment, Assignment::Assigned { class: 0 });
    }

    #[test]
    fn too_few_frames_abstains() {
        let cfg = ConsensusConfig::default();
        let r = visit_consensus("v", votes(&[(0, 9)]), &cfg);
        assert_eq!(
            r.assignment,
            Assignment::Abstain {
                reason: AbstainReason::TooFewFrames
            }
        );
    }

    #[test]
    fn exact_tie_abstains_as_tie_not_low_consensus() {
        let cfg = ConsensusConfig::default();
        let r = visit_consensus("v", votes(&[(0, 5), (1, 5)]), &cfg);
        // rho = 0.5 >= gamma, but the argmax is not unique
        assert!((r.rho.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(
            r.assignment,
            Assignment::Abstain {
                reason: AbstainReason::Tie
            }
        );
    }

    #[test]
    fn weak_majority_abstains_low_consensus() {
        let cfg = ConsensusConfig::default();
        let r = visit_consensus("v", votes(&[(0, 5), (1, 4), (2, 3)]), &cfg);
        assert_eq!(r.majority, Some(0));
        assert!(r.rho.unwrap() < 0.5);
        assert_eq!(
            r.assignment,
            Assignment::Abstain {
                reason: AbstainReason::LowConsensus
            }
        );
    }

    #[test]
    fn rho_exactly_gamma_assigns() {
        let cfg = ConsensusConfig::default();
        // 5 of 10 for class 0, the rest split, so the argmax is unique
        let r = visit_consensus("v", votes(&[(0, 5), (1, 3), (2, 2)]), &cfg);
        assert!((r.rho.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(r.assignment, Assignment::Assigned { class: 0 });
    }

    #[test]
    fn empty_votes_abstain_with_no_majority() {
        let cfg = ConsensusConfig::default();
        let r = visit_consensus("v", Vec::new(), &cfg);
        assert_eq!(r.majority, None);
        assert_eq!(r.rho, None);
        assert_eq!(
            r.assignment,
            Assignment::Abstain {
                reason: AbstainReason::TooFewFrames
            }
        );
    }

    #[test]
    fn report_roundtrip() {
        let cfg = ConsensusConfig::default();
        let results = vec![
            visit_consensus("a", votes(&[(0, 12)]), &cfg),
            visit_consensus("b", Vec::new(), &cfg),
        ];
        let mut buf = Vec::new();
        write_report(&results, &mut buf).unwrap();
        assert_eq!(read_report(&buf[..]).unwrap(), results);
    }
}
