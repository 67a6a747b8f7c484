//! File-based run configuration shared by all commands.
//!
//! One TOML file bundles every stage's parameters; missing keys fall back
//! to the module defaults, and `--seed` overrides the `seed` key. The
//! single `seed` key feeds both the scenario generator and training so a
//! run is reproducible from the file alone.

use serde::{Deserialize, Serialize};

use herdid_core::classifier::{ModelConfig, TrainConfig};
use herdid_core::consensus::ConsensusConfig;
use herdid_core::pointcloud::PreprocessConfig;
use herdid_core::recalibration::{HarvestMode, RecalibrationSchedule};
use herdid_core::synthdata::ScenarioConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; overrides `scenario.master_seed` and `train.seed`.
    pub seed: u64,
    /// Visit segmentation gap in seconds.
    pub gap_threshold: f64,
    /// Day block length in seconds for the multi-day protocol.
    pub day_seconds: f64,
    pub harvest_mode: HarvestMode,
    pub fine_tune_epochs: usize,
    pub fine_tune_learning_rate: f64,
    pub scenario: ScenarioConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub consensus: ConsensusConfig,
    pub schedule: RecalibrationSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scenario = ScenarioConfig::default();
        let preprocess = PreprocessConfig::default();
        let model = ModelConfig {
            num_classes: scenario.individuals,
            num_points: preprocess.target_points,
            ..ModelConfig::default()
        };
        Self {
            seed: 42,
            gap_threshold: 5.0,
            day_seconds: 86_400.0,
            harvest_mode: HarvestMode::default(),
            fine_tune_epochs: 10,
            fine_tune_learning_rate: 0.005,
            scenario,
            preprocess,
            model,
            train: TrainConfig::default(),
            consensus: ConsensusConfig::default(),
            schedule: RecalibrationSchedule::default(),
        }
    }
}

impl RunConfig {
    /// Apply the `--seed` override and push the master seed into the
    /// stages that consume one.
    pub fn resolve(mut self, seed_override: Option<u64>) -> Self {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        self.scenario.master_seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        self.scenario
            .validate()
            .map_err(|e| format!("scenario: {e}"))?;
        self.preprocess
            .validate()
            .map_err(|e| format!("preprocess: {e}"))?;
        self.model.validate().map_err(|e| format!("model: {e}"))?;
        self.train.validate().map_err(|e| format!("train: {e}"))?;
        self.consensus
            .validate()
            .map_err(|e| format!("consensus: {e}"))?;
        if !(self.gap_threshold > 0.0) {
            return Err(format!(
                "gap_threshold must be > 0, got {}",
                self.gap_threshold
            ));
        }
        if !(self.day_seconds > 0.0) {
            return Err(format!("day_seconds must be > 0, got {}", self.day_seconds));
        }
        if self.model.num_points != self.preprocess.target_points {
            return Err(format!(
                "model.num_points {} must equal preprocess.target_points {}",
                self.model.num_points, self.preprocess.target_points
            ));
        }
        if !(self.fine_tune_learning_rate >= 0.0) {
            return Err("fine_tune_learning_rate must be >= 0".into());
        }
        if self.fine_tune_epochs == 0 {
            return Err("fine_tune_epochs must be >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_consistent() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.num_points, cfg.preprocess.target_points);
        assert_eq!(cfg.model.num_classes, cfg.scenario.individuals);
    }

    #[test]
    fn empty_toml_gives_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.consensus.tau, 0.99);
    }

    #[test]
    fn partial_toml_overrides_one_key() {
        let cfg: RunConfig = toml::from_str("seed = 7\n[consensus]\ntau = 0.9\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.consensus.tau, 0.9);
        assert_eq!(cfg.consensus.min_frames, 10);
    }

    #[test]
    fn seed_override_propagates() {
        let cfg = RunConfig::default().resolve(Some(9));
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.scenario.master_seed, 9);
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn mismatched_widths_rejected() {
        let mut cfg = RunConfig::default();
        cfg.model.num_points = 100;
        assert!(cfg.validate().unwrap_err().contains("num_points"));
    }
}
