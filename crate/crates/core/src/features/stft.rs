use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};

use super::{FeatureConfig, FeatureError};
use crate::frames::FrameMatrix;

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Hann-windowed magnitude STFT, `frames x (n_fft / 2 + 1)`.
///
/// Frame `i` covers samples `[i * hop, i * hop + window)`, zero-padded to
/// `n_fft`. There is no centering pad, so the frame count is
/// `1 + (len - window) / hop`.
pub fn magnitude_spectrogram(wave: &[f64], cfg: &FeatureConfig) -> Result<FrameMatrix, FeatureError> {
    cfg.validate()?;
    let (win, hop, n_fft) = (cfg.window_samples(), cfg.hop_samples(), cfg.fft_size());
    if wave.len() < win {
        return Err(FeatureError::TooShort {
            required: win,
            got: wave.len(),
        });
    }
    let frames = 1 + (wave.len() - win) / hop;
    let bins = n_fft / 2 + 1;
    let window = hann_window(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut out = Vec::with_capacity(frames * bins);
    for i in 0..frames {
        let start = i * hop;
        for (k, slot) in buf.iter_mut().enumerate() {
            let x = if k < win { wave[start + k] * window[k] } else { 0.0 };
            *slot = Complex::new(x, 0.0);
        }
        fft.process(&mut buf);
        out.extend(buf[..bins].iter().map(|c| c.norm()));
    }
    Ok(FrameMatrix::new(frames, bins, out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> FeatureConfig {
        FeatureConfig::desk()
    }

    #[test]
    fn frame_count_and_too_short() {
        let c = cfg();
        let wave = vec![0.0; 512 + 160 * 10 + 17];
        let s = magnitude_spectrogram(&wave, &c).unwrap();
        assert_eq!(s.shape(), (11, 257));
        assert!(s.data().iter().all(|&v| v == 0.0));
        match magnitude_spectrogram(&[0.0; 100], &c) {
            Err(FeatureError::TooShort { required: 512, got: 100 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bin_centered_sine_concentrates_energy() {
        let c = cfg();
        let bin = 40;
        let f = bin as f64 * c.sample_rate as f64 / c.fft_size() as f64;
        let wave: Vec<f64> = (0..4000)
            .map(|n| (2.0 * PI * f * n as f64 / c.sample_rate as f64).sin())
            .collect();
        let s = magnitude_spectrogram(&wave, &c).unwrap();
        for t in 0..s.frames() {
            let row = s.row(t);
            let peak = row[bin];
            // a periodic Hann spreads a bin-centred tone over bin +- 1 only
            for (k, &v) in row.iter().enumerate() {
                if k.abs_diff(bin) > 1 {
                    assert!(20.0 * (v / peak).log10() < -30.0, "bin {k}");
                }
            }
            assert!((row[bin - 1] / peak - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn parseval_per_frame() {
        let c = cfg();
        let wave: Vec<f64> = (0..3000).map(|n| ((n * 7919) % 1000) as f64 / 500.0 - 1.0).collect();
        let s = magnitude_spectrogram(&wave, &c).unwrap();
        let (win, hop, n_fft) = (c.window_samples(), c.hop_samples(), c.fft_size());
        let w = hann_window(win);
        for t in 0..s.frames() {
            let energy: f64 = (0..win).map(|k| (wave[t * hop + k] * w[k]).powi(2)).sum();
            let row = s.row(t);
            let last = row.len() - 1;
            let mut spec = row[0].powi(2) + row[last].powi(2);
            spec += 2.0 * row[1..last].iter().map(|v| v * v).sum::<f64>();
            let rel = (spec / n_fft as f64 - energy).abs() / energy;
            assert!(rel < 1e-9, "frame {t}: {rel}");
        }
    }
}
