use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, TrainError};
use crate::config::ExperimentConfig;
use crate::features::NormStats;
use crate::model::{frozen_asr_params, init_params, Frontend, FrontendParams, ParamSet};

pub const CHECKPOINT_FORMAT: &str = "maskscalar-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or evaluate: the full experiment
/// config, the normalization statistics, weights and optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Number of completed training steps.
    pub step: u64,
    pub config: ExperimentConfig,
    pub stats: NormStats,
    pub params: FrontendParams,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn frontend(&self) -> Result<Frontend, TrainError> {
        Ok(Frontend::new(
            self.config.model.clone(),
            self.config.features.clone(),
            self.stats.clone(),
        )?)
    }

    pub fn to_json(&self) -> Result<String, serde_json::Error> {
        serde_json::to_string_pretty(self)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let text = self.to_json().map_err(|source| TrainError::Json {
            path: path.display().to_string(),
            source,
        })?;
        std::fs::write(path, text + "\n").map_err(|e| TrainError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        let ck: Self = serde_json::from_str(&text).map_err(|source| TrainError::Json {
            path: path.display().to_string(),
            source,
        })?;
        ck.validate().map_err(|msg| TrainError::Checkpoint {
            path: path.display().to_string(),
            msg,
        })?;
        Ok(ck)
    }

    /// Format, config, and parameter names/shapes against the layout the
    /// stored config implies.
    pub fn validate(&self) -> Result<(), String> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(format!(
                "unsupported format {:?} version {} (expected {CHECKPOINT_FORMAT:?} version {CHECKPOINT_VERSION})",
                self.format, self.version
            ));
        }
        self.config.validate().map_err(|e| e.to_string())?;
        if self.stats.bands() != self.config.features.n_mels {
            return Err(format!(
                "stats have {} bands but features.n_mels is {}",
                self.stats.bands(),
                self.config.features.n_mels
            ));
        }
        let layout = init_params(&self.config.model, 0).map_err(|e| e.to_string())?;
        same_layout("trainable", &layout.trainable, &self.params.trainable)?;
        same_layout("frozen_asr", &frozen_asr_params(&self.config.model), &self.params.frozen_asr)?;
        if !self.params.trainable.is_finite() {
            return Err("non-finite trainable parameters".into());
        }
        let slots: Vec<usize> = self.params.trainable.iter().map(|p| p.tensor.numel()).collect();
        let ok = self.adam.t.len() == slots.len()
            && self.adam.m.iter().map(Vec::len).eq(slots.iter().copied())
            && self.adam.v.iter().map(Vec::len).eq(slots.iter().copied());
        if !ok {
            return Err("optimizer state does not match the parameter layout".into());
        }
        Ok(())
    }
}

fn same_layout(what: &str, want: &ParamSet, got: &ParamSet) -> Result<(), String> {
    if want.len() != got.len() {
        return Err(format!("{what}: {} tensors, expected {}", got.len(), want.len()));
    }
    for (w, g) in want.iter().zip(got.iter()) {
        if w.name != g.name || w.tensor.shape() != g.tensor.shape() {
            return Err(format!(
                "{what}: found '{}' {:?}, expected '{}' {:?}",
                g.name,
                g.tensor.shape(),
                w.name,
                w.tensor.shape()
            ));
        }
    }
    Ok(())
}
