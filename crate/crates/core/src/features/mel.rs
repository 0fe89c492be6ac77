use super::{magnitude_spectrogram, FeatureConfig, FeatureError, MelSpectrogram};
use crate::frames::FrameMatrix;

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz < MIN_LOG_HZ {
        hz / F_SP
    } else {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel < MIN_LOG_MEL {
        mel * F_SP
    } else {
        MIN_LOG_HZ * ((mel - MIN_LOG_MEL) * log_step()).exp()
    }
}

/// Triangular filters with unit peak, `bins x n_mels`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    bins: usize,
    n_mels: usize,
    weights: Vec<f64>,
    /// `n_mels + 2` edge frequencies; filter `m` peaks at `edges[m + 1]`.
    edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn weight(&self, bin: usize, mel: usize) -> f64 {
        self.weights[bin * self.n_mels + mel]
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.edges_hz[1..self.n_mels + 1]
    }

    pub fn edges_hz(&self) -> &[f64] {
        &self.edges_hz
    }

    /// Projects a `frames x bins` magnitude spectrogram onto the Mel bands.
    pub fn apply(&self, spec: &FrameMatrix) -> Result<FrameMatrix, FeatureError> {
        if spec.dims() != self.bins {
            return Err(FeatureError::Config(format!(
                "spectrogram has {} bins, filterbank expects {}",
                spec.dims(),
                self.bins
            )));
        }
        let mut out = FrameMatrix::zeros(spec.frames(), self.n_mels);
        for t in 0..spec.frames() {
            let row = spec.row(t);
            let dst = &mut out.data_mut()[t * self.n_mels..(t + 1) * self.n_mels];
            for (k, &mag) in row.iter().enumerate() {
                if mag == 0.0 {
                    continue;
                }
                let w = &self.weights[k * self.n_mels..(k + 1) * self.n_mels];
                for (d, &wv) in dst.iter_mut().zip(w) {
                    *d += wv * mag;
                }
            }
        }
        Ok(out)
    }
}

pub fn mel_filterbank(cfg: &FeatureConfig) -> Result<MelFilterbank, FeatureError> {
    cfg.validate()?;
    let n_fft = cfg.fft_size();
    let bins = n_fft / 2 + 1;
    let n_mels = cfg.n_mels;
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / n_fft as f64;
    let mut weights = vec![0.0; bins * n_mels];
    for m in 0..n_mels {
        let (left, center, right) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        let mut any = false;
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let rise = (f - left) / (center - left);
            let fall = (right - f) / (right - center);
            let w = rise.min(fall).max(0.0);
            if w > 0.0 {
                any = true;
            }
            weights[k * n_mels + m] = w;
        }
        if !any {
            return Err(FeatureError::Config(format!(
                "mel filter {m} ({left:.1}-{right:.1} Hz) contains no FFT bin; \
                 reduce n_mels or raise n_fft"
            )));
        }
    }
    Ok(MelFilterbank {
        bins,
        n_mels,
        weights,
        edges_hz,
    })
}

pub fn mel_spectrogram(wave: &[f64], cfg: &FeatureConfig) -> Result<MelSpectrogram, FeatureError> {
    let fb = mel_filterbank(cfg)?;
    let spec = magnitude_spectrogram(wave, cfg)?;
    MelSpectrogram::new(fb.apply(&spec)?)
}
