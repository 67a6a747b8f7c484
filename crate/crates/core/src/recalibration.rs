//! Autonomous re-calibration: harvest consensus-assigned visits as
//! pseudo-labels, fine-tune the classifier, and repeat day over day.
//!
//! The experiment runner trains a base model on the first day's labeled
//! visits, then alternates evaluation and pseudo-label fine-tuning per the
//! schedule. Harvest and fine-tuning paths only ever see visits stripped
//! of their ground-truth labels.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    self, ModelConfig, ModelError, TrainConfig, TrainReport,
};
use crate::consensus::{classify_visit, ConsensusConfig, ConsensusResult};
use crate::evaluation::{metrics_report, LabeledResult, MetricsReport};
use crate::seed;
use crate::stream::{ClassId, Visit};
use crate::{Cloud, Model};

/// A consensus-assigned visit reused as training fuel.
#[derive(Debug, Clone)]
pub struct PseudoLabeledVisit {
    pub visit_id: String,
    pub pseudo_label: ClassId,
    pub rho: f64,
    pub frames: Vec<Cloud>,
}

/// Which frames of an assigned visit inherit the pseudo-label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HarvestMode {
    /// Label every frame, including those the confidence filter dropped;
    /// drifted frames are the ones worth learning from.
    AllFrames,
    /// Label only the tau-retained frames.
    ValidOnly,
}

impl Default for HarvestMode {
    fn default() -> Self {
        HarvestMode::AllFrames
    }
}

/// Turn assigned consensus results into per-visit pseudo-label pools.
/// Abstained visits contribute nothing.
pub fn harvest_pseudo_labels(
    results: &[ConsensusResult],
    visits: &[Visit],
    mode: HarvestMode,
) -> Vec<PseudoLabeledVisit> {
    let by_id: std::collections::HashMap<&str, &Visit> =
        visits.iter().map(|v| (v.visit_id.as_str(), v)).collect();
    results
        .iter()
        .filter_map(|r| {
            let class = r.assignment.class()?;
            let visit = by_id.get(r.visit_id.as_str())?;
            let frames = match mode {
                HarvestMode::AllFrames => visit.frames.iter().map(|f| f.cloud.clone()).collect(),
                HarvestMode::ValidOnly => r
                    .valid
                    .iter()
                    .map(|&(i, _)| visit.frames[i].cloud.clone())
                    .collect(),
            };
            Some(PseudoLabeledVisit {
                visit_id: r.visit_id.clone(),
                pseudo_label: class,
                rho: r.rho.expect("assigned visit has valid frames"),
                frames,
            })
        })
        .collect()
}

/// Fine-tune on a pseudo-label pool plus a replay sample. The input
/// parameters are untouched; round comparisons need both snapshots.
pub fn run_recalibration_round(
    params: &Model,
    pool: &[PseudoLabeledVisit],
    replay: &[(Cloud, ClassId)],
    cfg: &TrainConfig,
) -> Result<Model, ModelError> {
    if pool.is_empty() {
        return Err(ModelError::EmptyPool);
    }
    let mut examples: Vec<(Cloud, ClassId)> = pool
        .iter()
        .flat_map(|p| p.frames.iter().map(|c| (c.clone(), p.pseudo_label)))
        .collect();
    examples.extend_from_slice(replay);
    classifier::fine_tune(params, &examples, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    /// Day whose consensus output becomes the fine-tuning pool.
    pub pseudo_source_day: usize,
    pub evaluation_days: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecalibrationSchedule {
    /// Day whose ground-truth labels train the base model.
    pub train_day: usize,
    pub base_evaluation_days: Vec<usize>,
    pub rounds: Vec<Round>,
}

impl Default for RecalibrationSchedule {
    fn default() -> Self {
        Self {
            train_day: 0,
            base_evaluation_days: vec![1, 2],
            rounds: vec![
                Round {
                    pseudo_source_day: 1,
                    evaluation_days: vec![2, 3],
                },
                Round {
                    pseudo_source_day: 2,
                    evaluation_days: vec![3],
                },
            ],
        }
    }
}

impl RecalibrationSchedule {
    pub fn validate(&self, num_days: usize) -> Result<(), String> {
        let check = |day: usize, what: &str| {
            if day >= num_days {
                Err(format!("{what} {day} out of range ({num_days} days)"))
            } else {
                Ok(())
            }
        };
        check(self.train_day, "train_day")?;
        for &d in &self.base_evaluation_days {
            check(d, "evaluation day")?;
        }
        for r in &self.rounds {
            check(r.pseudo_source_day, "pseudo_source_day")?;
            if r.pseudo_source_day == self.train_day {
                return Err("pseudo_source_day must differ from train_day".into());
            }
            for &d in &r.evaluation_days {
                check(d, "evaluation day")?;
                if d < r.pseudo_source_day {
                    return Err(format!(
                        "evaluation day {d} precedes its pseudo source day {}",
                        r.pseudo_source_day
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One line of the experiment table. Metrics are fractions; the CSV
/// export renders percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model_state: String,
    pub test_day: usize,
    pub frame_accuracy: Option<f64>,
    pub visit_accuracy: Option<f64>,
    pub conversion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub base_train_report: TrainReport,
    /// Wall-clock field, excluded from byte-identity comparisons; `None`
    /// in deterministic artifacts.
    pub wall_clock_seconds: Option<f64>,
}

impl ExperimentReport {
    /// Table-shaped CSV: `Model State,Test Set,Frame %,Visit %,Conv. %`.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(f) => format!("{:.2}", f * 100.0),
            None => "NA".to_string(),
        };
        let mut out = String::from("Model State,Test Set,Frame %,Visit %,Conv. %\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},Day {},{},{},{}\n",
                r.model_state,
                r.test_day + 1,
                fmt(r.frame_accuracy),
                fmt(r.visit_accuracy),
                fmt(r.conversion)
            ));
        }
        out
    }
}

fn labeled_frames(visits: &[Visit]) -> Vec<(Cloud, ClassId)> {
    visits
        .iter()
        .filter_map(|v| v.true_label.map(|y| (v, y)))
        .flat_map(|(v, y)| v.frames.iter().map(move |f| (f.cloud.clone(), y)))
        .collect()
}

/// Classify every visit of a day and aggregate metrics.
pub fn evaluate_day(
    visits: &[Visit],
    params: &Model,
    cfg: &ConsensusConfig,
) -> Result<(Vec<LabeledResult>, MetricsReport), ModelError> {
    let outcomes = visits
        .iter()
        .map(|v| {
            Ok(LabeledResult {
                result: classify_visit(v, params, cfg)?,
                true_label: v.true_label,
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let report = metrics_report(&outcomes);
    Ok((outcomes, report))
}

/// Seeded replay sample from the base training examples, sized by
/// `replay_ratio` relative to the pool.
fn replay_sample(
    day1: &[(Cloud, ClassId)],
    pool_examples: usize,
    ratio: f64,
    seed_root: u64,
    round: usize,
) -> Vec<(Cloud, ClassId)> {
    let want = ((pool_examples as f64) * ratio).round() as usize;
    if want >= day1.len() {
        return day1.to_vec();
    }
    let mut idx: Vec<usize> = (0..day1.len()).collect();
    let mut rng = seed::rng(seed_root, &[0x4e91a7, round as u64]);
    idx.shuffle(&mut rng);
    idx.truncate(want);
    idx.sort_unstable();
    idx.into_iter().map(|i| day1[i].clone()).collect()
}

pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Fine-tuning rounds reuse the training batch/seed settings with
    /// these overrides.
    pub fine_tune_epochs: usize,
    pub fine_tune_learning_rate: f64,
    pub consensus: ConsensusConfig,
    pub harvest_mode: HarvestMode,
}

/// The full multi-day protocol: base training, per-round evaluation,
/// pseudo-label harvest and cumulative fine-tuning.
pub fn run_experiment(
    days: &[Vec<Visit>],
    schedule: &RecalibrationSchedule,
    cfg: &ExperimentConfig,
) -> Result<ExperimentReport, ModelError> {
    schedule
        .validate(days.len())
        .map_err(ModelError::InvalidConfig)?;
    let day1 = labeled_frames(&days[schedule.train_day]);
    let (base_params, base_train_report) = classifier::train(&cfg.model, &day1, &cfg.train)?;

    let mut rows = Vec::new();
    for &d in &schedule.base_evaluation_days {
        let (_, m) = evaluate_day(&days[d], &base_params, &cfg.consensus)?;
        rows.push(row("Base Model", d, &m));
    }

    let ft_cfg = TrainConfig {
        epochs: cfg.fine_tune_epochs,
        learning_rate: cfg.fine_tune_learning_rate,
        ..cfg.train.clone()
    };

    let mut params = base_params;
    let mut pool: Vec<PseudoLabeledVisit> = Vec::new();
    for (i, round) in schedule.rounds.iter().enumerate() {
        // the harvest path must not see evaluation labels
        let stripped: Vec<Visit> = days[round.pseudo_source_day]
            .iter()
            .map(Visit::without_label)
            .collect();
        let results = stripped
            .iter()
            .map(|v| classify_visit(v, &params, &cfg.consensus))
            .collect::<Result<Vec<_>, _>>()?;
        pool.extend(harvest_pseudo_labels(&results, &stripped, cfg.harvest_mode));
        // nothing harvested: the model carries over unchanged
        if !pool.is_empty() {
            let pool_examples: usize = pool.iter().map(|p| p.frames.len()).sum();
            let replay = replay_sample(
                &day1,
                pool_examples,
                cfg.train.replay_ratio,
                cfg.train.seed,
                i,
            );
            params = run_recalibration_round(&params, &pool, &replay, &ft_cfg)?;
        }

        let state = format!("Re-calib. {}", i + 1);
        for &d in &round.evaluation_days {
            let (_, m) = evaluate_day(&days[d], &params, &cfg.consensus)?;
            rows.push(row(&state, d, &m));
        }
    }

    Ok(ExperimentReport {
        rows,
        base_train_report,
        wall_clock_seconds: None,
    })
}

fn row(state: &str, day: usize, m: &MetricsReport) -> ReportRow {
    ReportRow {
        model_state: state.to_string(),
        test_day: day,
        frame_accuracy: m.frame_accuracy,
        visit_accuracy: m.visit_accuracy,
        conversion: m.conversion,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::visit_consensus;
    use crate::stream::Frame;

    fn visit_with_frames(id: &str, n: usize) -> Visit {
        let frames = (0..n)
            .map(|i| Frame {
                frame_id: format!("{id}_f{i}"),
                station_id: "s".into(),
                timestamp: i as f64,
                cloud: Cloud::new(vec![[i as f64, 0.0, 0.0]]).unwrap(),
            })
            .collect();
        Visit {
            visit_id: id.to_string(),
            station_id: "s".into(),
            frames,
            start_ts: 0.0,
            end_ts: (n - 1) as f64,
            true_label: Some(9),
        }
    }

    fn result(id: &str, votes: &[(ClassId, usize)]) -> ConsensusResult {
        let mut v = Vec::new();
        let mut i = 0;
        for &(c, n) in votes {
            for _ in 0..n {
                v.push((i, c));
                i += 1;
            }
        }
        visit_consensus(id, v, &ConsensusConfig::default())
    }

    #[test]
    fn harvest_keeps_only_assigned() {
        let visits = vec![
            visit_with_frames("a", 12),
            visit_with_frames("b", 12),
            visit_with_frames("c", 12),
        ];
        let results = vec![
            result("a", &[(2, 12)]),      // assigned 2
            result("b", &[(0, 4)]),       // abstains
            result("c", &[(0, 7), (1, 5)]), // assigned 0
        ];
        let pool = harvest_pseudo_labels(&results, &visits, HarvestMode::AllFrames);
        assert_eq!(pool.len(), 2);
        assert_eq!(pool[0].pseudo_label, 2);
        assert_eq!(pool[1].pseudo_label, 0);
        // all frames carry the label under AllFrames, even filtered ones
        assert_eq!(pool[0].frames.len(), 12);
    }

    #[test]
    fn harvest_valid_only_restricts_frames() {
        let visits = vec![visit_with_frames("a", 14)];
        let results = vec![result("a", &[(1, 12)])];
        let pool = harvest_pseudo_labels(&results, &visits, HarvestMode::ValidOnly);
        assert_eq!(pool[0].frames.len(), 12);
    }

    #[test]
    fn harvest_all_abstain_gives_empty_pool() {
        let visits = vec![visit_with_frames("a", 12)];
        let results = vec![result("a", &[(0, 6), (1, 6)])];
        assert!(harvest_pseudo_labels(&results, &visits, HarvestMode::AllFrames).is_empty());
    }

    #[test]
    fn round_requires_pool() {
        let cfg = ModelConfig {
            num_classes: 2,
            num_points: 4,
            point_widths: vec![4],
            head_widths: vec![],
            input_transform: false,
            ..ModelConfig::default()
        };
        let params = Model::init(cfg, 0).unwrap();
        let err =
            run_recalibration_round(&params, &[], &[], &TrainConfig::default()).unwrap_err();
        assert_eq!(err, ModelError::EmptyPool);
    }

    #[test]
    fn schedule_validation() {
        let sched = RecalibrationSchedule::default();
        assert!(sched.validate(4).is_ok());
        assert!(sched.validate(3).is_err()); // day 3 out of range
        let bad = RecalibrationSchedule {
            rounds: vec![Round {
                pseudo_source_day: 2,
                evaluation_days: vec![1],
            }],
            ..RecalibrationSchedule::default()
        };
        assert!(bad.validate(4).is_err()); // eval day precedes its source
    }

    #[test]
    fn csv_shape() {
        let report = ExperimentReport {
            rows: vec![ReportRow {
                model_state: "Base Model".into(),
                test_day: 1,
                frame_accuracy: Some(0.9394),
                visit_accuracy: Some(0.9694),
                conversion: None,
            }],
            base_train_report: TrainReport {
                epochs: vec![],
                best_epoch: 0,
                best_val_accuracy: 1.0,
            },
            wall_clock_seconds: None,
        };
        let csv = report.to_csv();
        assert_eq!(
            csv,
            "Model State,Test Set,Frame %,Visit %,Conv. %\nBase Model,Day 2,93.94,96.94,NA\n"
        );
    }
}
