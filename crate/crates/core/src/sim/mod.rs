//! Deterministic synthetic scenes: harmonic "speech", noise, reverberation,
//! SNR/SER mixing, and the two-channel examples the frontend trains on.

mod cleaner;
mod room;
mod scene;
mod sources;

pub use cleaner::{stub_cleaner, CleanerOutput};
pub use room::{convolve, mix_at_snr, rir_generate, t60_decay};
pub use scene::{
    calibrate_stats, make_example, render_scene, scene_mels, Scene, SceneMels, TrainingExample,
};
pub use sources::{synth_noise, synth_speech, SpeechSignal};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureError;
use crate::mask::MaskError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scene: {0}")]
    Config(String),
    #[error("mixing: {0}")]
    Mix(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Input topology of the frontend.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Channels: (cleaner output, raw microphone).
    #[default]
    Enhancement,
    /// Channels: (loopback reference, microphone).
    Aec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Pink,
    Tonal,
}

impl std::str::FromStr for NoiseKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "white" => Ok(Self::White),
            "pink" => Ok(Self::Pink),
            "tonal" => Ok(Self::Tonal),
            other => Err(SimError::Config(format!("unknown noise kind '{other}'"))),
        }
    }
}

/// One scene. `snr_db` is the signal-to-echo ratio in AEC mode; `+inf`
/// yields a scene without interference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub mode: Mode,
    #[serde(alias = "ser_db")]
    pub snr_db: f64,
    pub noise_kind: NoiseKind,
    pub rir_length: usize,
    /// Per-sample exponential amplitude decay of the RIR tail.
    pub rir_decay: f64,
    pub duration: f64,
    pub noise_context: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.duration > 0.0) {
            return Err(SimError::Config(format!("duration {} must be > 0", self.duration)));
        }
        if self.rir_length == 0 {
            return Err(SimError::Config("rir_length must be >= 1".into()));
        }
        if !(self.noise_context >= 0.0) {
            return Err(SimError::Config(format!(
                "noise_context {} must be >= 0",
                self.noise_context
            )));
        }
        if !(0.0..1.0).contains(&self.rir_decay) {
            return Err(SimError::Config(format!(
                "rir_decay {} outside [0, 1)",
                self.rir_decay
            )));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(SimError::Config(format!("snr_db {} is not usable", self.snr_db)));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    pub fn context_samples(&self) -> usize {
        (self.noise_context * self.sample_rate as f64).round() as usize
    }
}

/// Distribution of scenes for a training or evaluation stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorConfig {
    pub mode: Mode,
    pub sample_rate: u32,
    /// Enhancement SNR range in dB.
    pub snr_range_db: [f64; 2],
    /// AEC signal-to-echo range in dB.
    pub ser_range_db: [f64; 2],
    pub noise_kinds: Vec<NoiseKind>,
    /// Reverberation time range in seconds.
    pub t60_range: [f64; 2],
    /// Longest RIR in seconds.
    pub max_rir: f64,
    pub duration: f64,
    pub noise_context: f64,
    pub seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl SimulatorConfig {
    pub fn desk() -> Self {
        Self {
            mode: Mode::Enhancement,
            sample_rate: 16_000,
            snr_range_db: [-10.0, 30.0],
            ser_range_db: [-20.0, 5.0],
            noise_kinds: vec![NoiseKind::White, NoiseKind::Pink, NoiseKind::Tonal],
            t60_range: [0.0, 0.6],
            max_rir: 0.6,
            duration: 1.0,
            noise_context: 0.5,
            seed: 1,
        }
    }

    pub fn paper() -> Self {
        Self {
            t60_range: [0.0, 0.9],
            max_rir: 0.9,
            noise_context: 6.0,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r.iter().all(|v| v.is_finite());
        if !ordered(self.snr_range_db) || !ordered(self.ser_range_db) || !ordered(self.t60_range) {
            return Err(SimError::Config("ranges must be finite and ordered".into()));
        }
        if self.t60_range[0] < 0.0 {
            return Err(SimError::Config("t60 must be >= 0".into()));
        }
        if self.noise_kinds.is_empty() {
            return Err(SimError::Config("noise_kinds is empty".into()));
        }
        if !(self.duration > 0.0 && self.noise_context >= 0.0 && self.max_rir >= 0.0) {
            return Err(SimError::Config("durations must be nonnegative".into()));
        }
        Ok(())
    }

    /// Scene `index` of the stream: a pure function of `(seed, index)`.
    pub fn scene(&self, index: u64) -> SceneConfig {
        use rand::{Rng, SeedableRng};
        let seed = derive_seed(self.seed, index);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let range = match self.mode {
            Mode::Enhancement => self.snr_range_db,
            Mode::Aec => self.ser_range_db,
        };
        let snr_db = range[0] + (range[1] - range[0]) * rng.random::<f64>();
        let kind = self.noise_kinds[rng.random_range(0..self.noise_kinds.len())];
        let t60 = self.t60_range[0] + (self.t60_range[1] - self.t60_range[0]) * rng.random::<f64>();
        self.scene_with(seed, snr_db, kind, t60)
    }

    /// Scene with explicit SNR/SER, noise kind and T60.
    pub fn scene_with(&self, seed: u64, snr_db: f64, noise_kind: NoiseKind, t60: f64) -> SceneConfig {
        let sr = self.sample_rate as f64;
        let rir_length = ((t60.min(self.max_rir) * sr).round() as usize).max(1);
        SceneConfig {
            mode: self.mode,
            snr_db,
            noise_kind,
            rir_length,
            rir_decay: t60_decay(t60, self.sample_rate),
            duration: self.duration,
            noise_context: self.noise_context,
            sample_rate: self.sample_rate,
            seed,
        }
    }
}

/// SplitMix64-style mixing of a master seed with a stream index.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
