use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{NoiseKind, SimError};

pub const SOURCE_RMS: f64 = 0.1;

const RAMP_SECONDS: f64 = 0.01;
const CHORD_HZ: [f64; 5] = [261.63, 329.63, 392.0, 523.25, 659.26];
// pole frequencies of the pink shaping cascade; each zero sits at 2.5x its pole
const PINK_POLES_HZ: [f64; 3] = [60.0, 400.0, 2600.0];
const PINK_ZERO_RATIO: f64 = 2.5;

/// One voiced syllable.
#[derive(Clone, Debug, PartialEq)]
pub struct Syllable {
    pub start: usize,
    pub end: usize,
    pub f0_start: f64,
    pub f0_end: f64,
    pub harmonics: usize,
}

impl Syllable {
    /// Programmed fundamental at sample `n` (linear glide).
    pub fn f0_at(&self, n: usize) -> f64 {
        let span = (self.end - self.start).max(1) as f64;
        let u = (n.saturating_sub(self.start)) as f64 / span;
        self.f0_start + (self.f0_end - self.f0_start) * u.min(1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeechSignal {
    pub samples: Vec<f64>,
    pub syllables: Vec<Syllable>,
}

/// Harmonic syllables with gliding fundamentals separated by exact silence,
/// scaled to RMS 0.1.
pub fn synth_speech(duration: f64, sample_rate: u32, seed: u64) -> Result<SpeechSignal, SimError> {
    if !(duration > 0.0) {
        return Err(SimError::Config(format!("duration {duration} must be > 0")));
    }
    let sr = sample_rate as f64;
    let len = (duration * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = vec![0.0; len];
    let mut syllables = Vec::new();
    let ramp = (RAMP_SECONDS * sr) as usize;

    let mut pos = (rng.random_range(0.0..0.08) * sr) as usize;
    while pos < len {
        let on = (rng.random_range(0.15..0.4) * sr) as usize;
        let end = (pos + on).min(len);
        let f0_start: f64 = rng.random_range(100.0..300.0);
        let f0_end = (f0_start * rng.random_range(0.95..1.05)).clamp(100.0, 300.0);
        let harmonics = rng.random_range(3..=6);
        let amps: Vec<f64> = (1..=harmonics)
            .map(|h| rng.random_range(0.6..1.0) / h as f64)
            .collect();
        let mut phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let syl = Syllable {
            start: pos,
            end,
            f0_start,
            f0_end,
            harmonics,
        };
        let n_on = end - pos;
        for n in pos..end {
            let f0 = syl.f0_at(n);
            let k = n - pos;
            let env = if k < ramp {
                0.5 - 0.5 * (PI * k as f64 / ramp as f64).cos()
            } else if n_on - k <= ramp {
                0.5 - 0.5 * (PI * (n_on - k) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let mut v = 0.0;
            for (h, (a, ph)) in amps.iter().zip(phases.iter_mut()).enumerate() {
                let f = f0 * (h + 1) as f64;
                if f < sr / 2.0 {
                    v += a * ph.sin();
                }
                *ph += 2.0 * PI * f / sr;
            }
            samples[n] = env * v;
        }
        syllables.push(syl);
        let off = (rng.random_range(0.05..0.2) * sr) as usize;
        pos = end + off;
    }
    normalize_rms(&mut samples, SOURCE_RMS);
    Ok(SpeechSignal { samples, syllables })
}

pub fn synth_noise(kind: NoiseKind, duration: f64, sample_rate: u32, seed: u64) -> Result<Vec<f64>, SimError> {
    if !(duration > 0.0) {
        return Err(SimError::Config(format!("duration {duration} must be > 0")));
    }
    let sr = sample_rate as f64;
    let len = (duration * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut white = || -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let mut out = match kind {
        NoiseKind::White => white(),
        NoiseKind::Pink => {
            let mut x = white();
            for fp in PINK_POLES_HZ {
                let p = (-2.0 * PI * fp / sr).exp();
                let z = (-2.0 * PI * fp * PINK_ZERO_RATIO / sr).exp();
                one_pole_zero(&mut x, p, z);
            }
            x
        }
        NoiseKind::Tonal => {
            let phases: Vec<f64> = CHORD_HZ.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            (0..len)
                .map(|n| {
                    CHORD_HZ
                        .iter()
                        .zip(&phases)
                        .map(|(f, ph)| (2.0 * PI * f * n as f64 / sr + ph).sin())
                        .sum()
                })
                .collect()
        }
    };
    normalize_rms(&mut out, SOURCE_RMS);
    Ok(out)
}

/// `y[n] = x[n] - z x[n-1] + p y[n-1]`, in place.
fn one_pole_zero(x: &mut [f64], p: f64, z: f64) {
    let (mut x_prev, mut y_prev) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = *v - z * x_prev + p * y_prev;
        x_prev = *v;
        y_prev = y;
        *v = y;
    }
}

pub(crate) fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let r = rms(x);
    if r > 0.0 {
        let g = target / r;
        x.iter_mut().for_each(|v| *v *= g);
    }
}
