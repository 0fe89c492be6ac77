//! Proxy metrics, the mask-scalar sweep and per-bucket evaluation.

mod metrics;
mod sweep;

pub use metrics::{enhanced_features, mel_snr_improvement, proxy_distance, SNR_CAP_DB};
pub use sweep::{
    eval_set, evaluate, sweep_alpha, write_sweep_csv, BucketSummary, EvalSummary, MaskSource, SweepAlpha, SweepRow,
    SWEEP_HEADER,
};

use thiserror::Error;

use crate::config::ConfigError;
use crate::features::FeatureError;
use crate::frames::FramesError;
use crate::mask::MaskError;
use crate::model::ModelError;
use crate::sim::SimError;
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Frames(#[from] FramesError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}
