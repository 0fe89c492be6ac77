//! The masking frontend: a causal conformer-style encoder over two feature
//! channels, a sigmoid mask decoder, the per-frame mask-scalar net behind a
//! stop-gradient, and a frozen ASR-encoder proxy for the ASR loss.

mod asr;
mod config;
mod encoder;
mod forward;
mod params;

#[cfg(test)]
mod tests;

pub use asr::{frozen_asr_encoder, frozen_asr_graph};
pub use config::ModelConfig;
pub use encoder::{causal_attention_mask, encoder_forward, mask_decoder, mask_scalar_net};
pub use forward::{AlphaMode, ForwardOutput, ForwardVars, Frontend};
pub use params::{
    frozen_asr_params, init_params, Bound, FrontendParams, NamedTensor, ParamGroup, ParamSet,
    ALPHA_INIT_STD,
};

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::features::FeatureError;
use crate::frames::FramesError;
use crate::mask::MaskError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter '{0}' is missing")]
    MissingParam(String),
    #[error("geometry mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Frames(#[from] FramesError),
}
