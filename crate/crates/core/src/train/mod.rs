//! Losses, schedules, the Adam optimizer and the deterministic training loop.

mod adam;
mod check;
mod checkpoint;
mod loss;
mod schedule;
mod trainer;


pub use adam::AdamState;
pub use check::frontend_grad_check;
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use loss::{asr_loss, asr_loss_graph, embedding_loss, mask_loss, mask_loss_graph, LossBreakdown};
pub use schedule::{alpha_mode, lambda_schedule};
pub use trainer::{
    batch_graph, batch_loss, checkpoint_path, train, train_step, BatchVars, ExamplePool, MetricsLog, StepReport, Trainer,
    METRICS_HEADER,
};

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::config::ConfigError;
use crate::frames::FramesError;
use crate::model::ModelError;
use crate::sim::SimError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Frames(#[from] FramesError),
    #[error("{0}")]
    Shape(String),
    #[error("non-finite {term} = {value} at step {step}, batch example {example} (scene seed {scene_seed})")]
    NonFinite {
        step: u64,
        example: usize,
        scene_seed: u64,
        term: &'static str,
        value: f64,
    },
    #[error("forward pass failed on batch example {example} (scene seed {scene_seed}): {source}")]
    Forward {
        example: usize,
        scene_seed: u64,
        source: ModelError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
}

impl TrainError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
