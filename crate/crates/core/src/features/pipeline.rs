use serde::{Deserialize, Serialize};

use super::{
    AsrFeatures, FeatureConfig, FeatureError, MelSpectrogram, NormMode, LOG_FLOOR, STD_FLOOR,
};
use crate::frames::FrameMatrix;

/// Per-band mean and standard deviation of log-Mel values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self, FeatureError> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(FeatureError::Stats(format!(
                "mean has {} bands, std has {}",
                mean.len(),
                std.len()
            )));
        }
        if let Some((band, s)) = std.iter().enumerate().find(|(_, s)| !(**s > 0.0)) {
            return Err(FeatureError::Stats(format!("std of band {band} is {s}; must be > 0")));
        }
        Ok(Self { mean, std })
    }

    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    /// Mean and reciprocal std repeated across `stack` positions, matching
    /// the stacked feature layout.
    pub fn tiled(&self, stack: usize) -> (Vec<f64>, Vec<f64>) {
        let mean = self.mean.repeat(stack);
        let inv_std = self.std.iter().map(|s| 1.0 / s).collect::<Vec<_>>().repeat(stack);
        (mean, inv_std)
    }

    /// `(log - mean) / std` for a log matrix whose width is a multiple of the
    /// band count.
    pub fn normalize(&self, log: &FrameMatrix) -> Result<FrameMatrix, FeatureError> {
        let bands = self.bands();
        if log.dims() % bands != 0 {
            return Err(FeatureError::Stats(format!(
                "{} dims are not a multiple of {bands} bands",
                log.dims()
            )));
        }
        let dims = log.dims();
        Ok(FrameMatrix::from_fn(log.frames(), dims, |t, d| {
            let b = d % bands;
            (log.get(t, d) - self.mean[b]) / self.std[b]
        }))
    }

    fn validate(&self) -> Result<(), FeatureError> {
        Self::new(self.mean.clone(), self.std.clone()).map(|_| ())
    }
}

/// `ln(max(x, 1e-8))` element-wise.
pub fn log_compress(linear: &FrameMatrix) -> FrameMatrix {
    linear.map(|v| v.max(LOG_FLOOR).ln())
}

/// Population statistics of log values over every frame of the corpus.
pub fn normalization_stats(corpus: &[MelSpectrogram]) -> Result<NormStats, FeatureError> {
    let first = corpus
        .first()
        .ok_or_else(|| FeatureError::Stats("empty corpus".into()))?;
    let bands = first.bands();
    let mut count = 0usize;
    let mut mean = vec![0.0; bands];
    let mut m2 = vec![0.0; bands];
    for mel in corpus {
        if mel.bands() != bands {
            return Err(FeatureError::Stats(format!(
                "corpus mixes {bands} and {} bands",
                mel.bands()
            )));
        }
        for t in 0..mel.frames() {
            count += 1;
            for (b, &v) in mel.values().row(t).iter().enumerate() {
                // Welford update
                let x = v.max(LOG_FLOOR).ln();
                let delta = x - mean[b];
                mean[b] += delta / count as f64;
                m2[b] += delta * (x - mean[b]);
            }
        }
    }
    if count < 2 {
        return Err(FeatureError::Stats(format!(
            "need at least 2 frames, corpus has {count}"
        )));
    }
    let std = m2
        .iter()
        .map(|s| (s / count as f64).sqrt().max(STD_FLOOR))
        .collect();
    NormStats::new(mean, std)
}

/// Concatenates `stack` consecutive frames ending at each frame, oldest
/// first. Frames before the start repeat frame 0, so no output frame looks
/// ahead.
pub fn stack_frames(m: &FrameMatrix, stack: usize) -> FrameMatrix {
    let dims = m.dims();
    FrameMatrix::from_fn(m.frames(), dims * stack, |t, d| {
        let (pos, band) = (d / dims, d % dims);
        let src = (t + pos + 1).saturating_sub(stack);
        m.get(src, band)
    })
}

/// Keeps frames `0, factor, 2 * factor, ...`.
pub fn subsample_frames(m: &FrameMatrix, factor: usize) -> FrameMatrix {
    let frames = m.frames().div_ceil(factor);
    FrameMatrix::from_fn(frames, m.dims(), |t, d| m.get(t * factor, d))
}

/// Stacks and subsamples a linear Mel spectrogram into mask geometry.
pub fn stack_subsample(mel: &FrameMatrix, cfg: &FeatureConfig) -> FrameMatrix {
    subsample_frames(&stack_frames(mel, cfg.stack), cfg.subsample)
}

/// Log, normalize, stack, subsample.
///
/// In [`NormMode::PerUtterance`] the supplied stats are ignored and
/// recomputed from `mel` itself.
pub fn asr_feature_pipeline(
    mel: &MelSpectrogram,
    stats: &NormStats,
    cfg: &FeatureConfig,
) -> Result<AsrFeatures, FeatureError> {
    let own;
    let stats = match cfg.norm_mode {
        NormMode::Global => stats,
        NormMode::PerUtterance => {
            own = normalization_stats(std::slice::from_ref(mel))?;
            &own
        }
    };
    stats.validate()?;
    if stats.bands() != mel.bands() {
        return Err(FeatureError::Stats(format!(
            "stats have {} bands, spectrogram has {}",
            stats.bands(),
            mel.bands()
        )));
    }
    let normalized = stats.normalize(&log_compress(mel.values()))?;
    let stacked = stack_subsample(&normalized, cfg);
    AsrFeatures::new(stacked, mel.bands(), cfg.stack)
}
