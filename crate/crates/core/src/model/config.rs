use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::sim::Mode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub units: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    /// Attention window: frame t attends to `[t - left_context, t]`.
    pub left_context: usize,
    /// Width of the mask, `n_mels * stack`.
    pub mask_dim: usize,
    pub mode: Mode,
    /// Detach the scalar net's encoder input (E2). `false` gives E1.
    pub stop_gradient: bool,
    /// Hidden width of the frozen ASR proxy.
    pub asr_units: usize,
    pub asr_kernel: usize,
    pub asr_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            layers: 1,
            units: 32,
            heads: 4,
            ffn_dim: 64,
            conv_kernel: 7,
            left_context: 8,
            mask_dim: 128,
            mode: Mode::Enhancement,
            stop_gradient: true,
            asr_units: 64,
            asr_kernel: 3,
            asr_seed: 0x5EED_A5A5,
        }
    }

    pub fn paper() -> Self {
        Self {
            layers: 4,
            units: 256,
            heads: 4,
            ffn_dim: 1024,
            conv_kernel: 15,
            left_context: 31,
            mask_dim: 512,
            asr_units: 256,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.layers == 0 || self.units == 0 || self.ffn_dim == 0 || self.mask_dim == 0 {
            return bad("layers, units, ffn_dim and mask_dim must be >= 1".into());
        }
        if self.heads == 0 || self.units % self.heads != 0 {
            return bad(format!("units {} not divisible by heads {}", self.units, self.heads));
        }
        if self.conv_kernel % 2 == 0 {
            return bad(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if self.asr_units == 0 || self.asr_kernel == 0 {
            return bad("asr_units and asr_kernel must be >= 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.units / self.heads
    }
}
