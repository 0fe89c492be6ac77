//! Waveform to linear Mel spectrogram to normalized, stacked ASR features.

mod mel;
mod pipeline;
mod stft;
pub mod wav;

pub use mel::{hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz, MelFilterbank};
pub use pipeline::{
    asr_feature_pipeline, log_compress, normalization_stats, stack_frames, stack_subsample,
    subsample_frames, NormStats,
};
pub use stft::{hann_window, magnitude_spectrogram};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::{FrameMatrix, FramesError};

/// Floor applied before the log so silent bins stay finite.
pub const LOG_FLOOR: f64 = 1e-8;
/// Lower bound on normalization standard deviations.
pub const STD_FLOOR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("waveform has {got} samples; at least {required} (one window) are required")]
    TooShort { required: usize, got: usize },
    #[error("invalid feature config: {0}")]
    Config(String),
    #[error("normalization: {0}")]
    Stats(String),
    #[error(transparent)]
    Frames(#[from] FramesError),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Corpus-level statistics computed once and frozen.
    #[default]
    Global,
    /// Statistics recomputed from each utterance.
    PerUtterance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    /// Analysis window in seconds.
    pub window: f64,
    /// Hop in seconds.
    pub hop: f64,
    /// FFT size; `None` selects the next power of two at or above the window.
    pub n_fft: Option<usize>,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub stack: usize,
    pub subsample: usize,
    pub norm_mode: NormMode,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl FeatureConfig {
    pub fn desk() -> Self {
        Self {
            sample_rate: 16_000,
            window: 0.032,
            hop: 0.010,
            n_fft: None,
            n_mels: 32,
            fmin: 20.0,
            fmax: 7_600.0,
            stack: 4,
            subsample: 3,
            norm_mode: NormMode::Global,
        }
    }

    pub fn paper() -> Self {
        Self {
            n_mels: 128,
            ..Self::desk()
        }
    }

    pub fn window_samples(&self) -> usize {
        (self.window * self.sample_rate as f64).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop * self.sample_rate as f64).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.n_fft
            .unwrap_or_else(|| self.window_samples().next_power_of_two())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size() / 2 + 1
    }

    /// Width of one stacked feature frame, which is also the mask width.
    pub fn stacked_dims(&self) -> usize {
        self.n_mels * self.stack
    }

    /// Frame count after stacking and subsampling `frames` input frames.
    pub fn stacked_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.subsample)
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: String| Err(FeatureError::Config(m));
        let (win, hop) = (self.window_samples(), self.hop_samples());
        if win == 0 || hop == 0 {
            return bad(format!("window ({win}) and hop ({hop}) must be at least one sample"));
        }
        if hop > win {
            return bad(format!("hop {} s exceeds window {} s", self.hop, self.window));
        }
        if let Some(n) = self.n_fft {
            if n < win {
                return bad(format!("n_fft {n} is shorter than the window ({win} samples)"));
            }
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return bad(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got fmin={} fmax={}",
                self.fmin, self.fmax
            ));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be positive".into());
        }
        if self.stack == 0 || self.subsample == 0 {
            return bad("stack and subsample must be at least 1".into());
        }
        Ok(())
    }
}

/// Nonnegative linear-magnitude Mel spectrogram, `frames x bands`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram(FrameMatrix);

impl MelSpectrogram {
    pub fn new(values: FrameMatrix) -> Result<Self, FeatureError> {
        if let Some((index, &value)) = values
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= 0.0))
        {
            return Err(FramesError::Range {
                what: "mel spectrogram",
                index,
                value,
                constraint: "value >= 0",
            }
            .into());
        }
        Ok(Self(values))
    }

    pub fn frames(&self) -> usize {
        self.0.frames()
    }

    pub fn bands(&self) -> usize {
        self.0.dims()
    }

    pub fn values(&self) -> &FrameMatrix {
        &self.0
    }

    pub fn into_inner(self) -> FrameMatrix {
        self.0
    }

    /// Element-wise sum; the result of adding two spectrograms stays nonnegative.
    pub fn add(&self, other: &Self) -> Result<Self, FeatureError> {
        Ok(Self(self.0.zip_map(&other.0, "mel add", |a, b| a + b)?))
    }
}

/// Log-compressed, normalized, stacked and subsampled features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsrFeatures {
    values: FrameMatrix,
    n_mels: usize,
    stack: usize,
}

impl AsrFeatures {
    pub fn new(values: FrameMatrix, n_mels: usize, stack: usize) -> Result<Self, FeatureError> {
        if values.dims() != n_mels * stack {
            return Err(FramesError::Shape {
                what: "asr features",
                expected: (values.frames(), n_mels * stack),
                got: values.shape(),
            }
            .into());
        }
        Ok(Self {
            values,
            n_mels,
            stack,
        })
    }

    pub fn frames(&self) -> usize {
        self.values.frames()
    }

    pub fn dims(&self) -> usize {
        self.values.dims()
    }

    pub fn values(&self) -> &FrameMatrix {
        &self.values
    }
}
