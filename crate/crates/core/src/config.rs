//! Experiment configuration: one JSON document with `features`, `model`,
//! `schedule`, `training`, `simulator` and `eval` sections, overlaid on a
//! preset.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::features::FeatureConfig;
use crate::model::ModelConfig;
use crate::sim::{Mode, SimulatorConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub lambda_start_step: u64,
    pub lambda_end_step: u64,
    pub lambda_max: f64,
    pub alpha_unfreeze_step: u64,
    pub alpha_fixed_value: f64,
    pub total_steps: u64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainSchedule {
    pub fn desk() -> Self {
        Self {
            lambda_start_step: 200,
            lambda_end_step: 2000,
            lambda_max: 100.0,
            alpha_unfreeze_step: 3000,
            alpha_fixed_value: 0.5,
            total_steps: 5000,
            learning_rate: 1e-3,
            seed: 1,
        }
    }

    pub fn paper() -> Self {
        Self {
            lambda_start_step: 20_000,
            lambda_end_step: 200_000,
            alpha_unfreeze_step: 200_000,
            total_steps: 400_000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.lambda_start_step < self.lambda_end_step && self.lambda_end_step <= self.total_steps) {
            return Err(ConfigError::Invalid(format!(
                "need lambda_start_step {} < lambda_end_step {} <= total_steps {}",
                self.lambda_start_step, self.lambda_end_step, self.total_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha_fixed_value) {
            return Err(ConfigError::Invalid(format!(
                "alpha_fixed_value {} outside [0, 1]",
                self.alpha_fixed_value
            )));
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return Err(ConfigError::Invalid(format!("lambda_max {}", self.lambda_max)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ConfigError::Invalid(format!("learning_rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    /// Mask floor.
    pub beta: f64,
    pub checkpoint_every: u64,
    /// Distinct simulator scenes cycled through during training.
    pub pool_size: usize,
    /// Scenes used to estimate the normalization statistics.
    pub calibration_scenes: usize,
    /// Optional global gradient-norm clip.
    pub clip_norm: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            beta: 0.01,
            checkpoint_every: 1000,
            pool_size: 256,
            calibration_scenes: 32,
            clip_norm: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 || self.pool_size == 0 || self.checkpoint_every == 0 {
            return Err(ConfigError::Invalid(
                "batch_size, pool_size and checkpoint_every must be >= 1".into(),
            ));
        }
        if self.calibration_scenes == 0 {
            return Err(ConfigError::Invalid("calibration_scenes must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(ConfigError::Invalid(format!("beta {} outside [0, 1)", self.beta)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(ConfigError::Invalid(format!("clip_norm {c} must be > 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub snr_buckets_db: Vec<f64>,
    pub ser_buckets_db: Vec<f64>,
    pub scenes_per_bucket: usize,
    pub seed: u64,
    pub sweep_alphas: Vec<f64>,
    /// Bucket used by `sweep-alpha`.
    pub sweep_snr_db: f64,
    pub beta: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            snr_buckets_db: vec![-5.0, 0.0, 20.0, 60.0],
            ser_buckets_db: vec![-10.0, -5.0, 0.0, 5.0],
            scenes_per_bucket: 16,
            seed: 9001,
            sweep_alphas: vec![1e-6, 0.25, 0.5, 0.75, 1.0],
            sweep_snr_db: 0.0,
            beta: 0.01,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.scenes_per_bucket == 0 {
            return Err(ConfigError::Invalid("scenes_per_bucket must be >= 1".into()));
        }
        if self.sweep_alphas.is_empty() || self.sweep_alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(ConfigError::Invalid("sweep_alphas must be nonempty and in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(ConfigError::Invalid(format!("beta {} outside [0, 1)", self.beta)));
        }
        Ok(())
    }

    pub fn buckets(&self, mode: Mode) -> &[f64] {
        match mode {
            Mode::Enhancement => &self.snr_buckets_db,
            Mode::Aec => &self.ser_buckets_db,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub training: TrainingConfig,
    pub simulator: SimulatorConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self {
                features: FeatureConfig::desk(),
                model: ModelConfig::desk(),
                schedule: TrainSchedule::desk(),
                training: TrainingConfig::default(),
                simulator: SimulatorConfig::desk(),
                eval: EvalConfig::default(),
            },
            Preset::Paper => Self {
                features: FeatureConfig::paper(),
                model: ModelConfig::paper(),
                schedule: TrainSchedule::paper(),
                training: TrainingConfig::default(),
                simulator: SimulatorConfig::paper(),
                eval: EvalConfig::default(),
            },
        }
    }

    /// Preset with `overlay` merged in key by key; unknown keys are errors.
    pub fn from_overlay(preset: Preset, overlay: &Value) -> Result<Self, ConfigError> {
        let mut base = serde_json::to_value(Self::preset(preset))?;
        merge(&mut base, overlay);
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(preset: Preset, path: Option<&Path>) -> Result<Self, ConfigError> {
        let overlay = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                serde_json::from_str(&text)?
            }
            None => Value::Object(Default::default()),
        };
        Self::from_overlay(preset, &overlay)
    }

    /// Sets the input topology of both the model and the simulator.
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.model.mode = mode;
        self.simulator.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.features.validate().map_err(|e| wrap(&e))?;
        self.model.validate().map_err(|e| wrap(&e))?;
        self.simulator.validate().map_err(|e| wrap(&e))?;
        self.schedule.validate()?;
        self.training.validate()?;
        self.eval.validate()?;
        if self.model.mask_dim != self.features.stacked_dims() {
            return Err(ConfigError::Invalid(format!(
                "model.mask_dim {} != features.n_mels {} x features.stack {}",
                self.model.mask_dim, self.features.n_mels, self.features.stack
            )));
        }
        if self.model.mode != self.simulator.mode {
            return Err(ConfigError::Invalid(format!(
                "model.mode {:?} != simulator.mode {:?}",
                self.model.mode, self.simulator.mode
            )));
        }
        if self.simulator.sample_rate != self.features.sample_rate {
            return Err(ConfigError::Invalid(format!(
                "simulator.sample_rate {} != features.sample_rate {}",
                self.simulator.sample_rate, self.features.sample_rate
            )));
        }
        Ok(())
    }
}

fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn presets_validate() {
        ExperimentConfig::preset(Preset::Desk).validate().unwrap();
        ExperimentConfig::preset(Preset::Paper).validate().unwrap();
        assert_eq!(ExperimentConfig::preset(Preset::Paper).model.mask_dim, 512);
    }

    #[test]
    fn overlay_merges_nested_keys() {
        let cfg = ExperimentConfig::from_overlay(
            Preset::Desk,
            &json!({"schedule": {"total_steps": 10, "lambda_end_step": 8, "lambda_start_step": 2}, "model": {"units": 16}}),
        )
        .unwrap();
        assert_eq!(cfg.schedule.total_steps, 10);
        assert_eq!(cfg.schedule.lambda_max, 100.0);
        assert_eq!(cfg.model.units, 16);
        assert_eq!(cfg.model.layers, 1);
    }

    #[test]
    fn overlay_rejects_unknown_and_inconsistent() {
        assert!(ExperimentConfig::from_overlay(Preset::Desk, &json!({"model": {"unitz": 3}})).is_err());
        assert!(ExperimentConfig::from_overlay(Preset::Desk, &json!({"features": {"n_mels": 40}})).is_err());
        assert!(ExperimentConfig::from_overlay(Preset::Desk, &json!({"model": {"mode": "aec"}})).is_err());
        assert!(ExperimentConfig::from_overlay(
            Preset::Desk,
            &json!({"model": {"mode": "aec"}, "simulator": {"mode": "aec"}})
        )
        .is_ok());
    }

    #[test]
    fn schedule_invariants() {
        let mut s = TrainSchedule::desk();
        s.lambda_end_step = s.lambda_start_step;
        assert!(s.validate().is_err());
        let mut s = TrainSchedule::desk();
        s.alpha_fixed_value = 1.5;
        assert!(s.validate().is_err());
    }
}
