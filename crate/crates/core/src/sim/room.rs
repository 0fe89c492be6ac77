use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};

use super::SimError;

/// Per-sample amplitude decay giving a 60 dB drop after `t60` seconds.
/// `t60 <= 0` gives 0 (no tail).
pub fn t60_decay(t60: f64, sample_rate: u32) -> f64 {
    if t60 <= 0.0 {
        return 0.0;
    }
    10f64.powf(-3.0 / (t60 * sample_rate as f64))
}

/// `h[0] = 1`, `h[n] = decay^n * g_n` with Gaussian `g_n`, scaled to unit
/// energy.
pub fn rir_generate(rir_length: usize, decay: f64, seed: u64) -> Result<Vec<f64>, SimError> {
    if rir_length == 0 {
        return Err(SimError::Config("rir_length must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&decay) {
        return Err(SimError::Config(format!("rir_decay {decay} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = Vec::with_capacity(rir_length);
    h.push(1.0);
    let mut gain = 1.0;
    for _ in 1..rir_length {
        gain *= decay;
        let g: f64 = StandardNormal.sample(&mut rng);
        h.push(gain * g);
    }
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    h.iter_mut().for_each(|v| *v /= norm);
    Ok(h)
}

/// Full linear convolution, length `x.len() + h.len() - 1`.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    if h.len().min(x.len()) <= 32 {
        let mut out = vec![0.0; out_len];
        for (i, &xv) in x.iter().enumerate() {
            for (j, &hv) in h.iter().enumerate() {
                out[i + j] += xv * hv;
            }
        }
        return out;
    }
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |s: &[f64]| -> Vec<Complex<f64>> {
        let mut v: Vec<Complex<f64>> = s.iter().map(|&r| Complex::new(r, 0.0)).collect();
        v.resize(n, Complex::new(0.0, 0.0));
        v
    };
    let (mut a, mut b) = (pad(x), pad(h));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v;
    }
    inv.process(&mut a);
    a[..out_len].iter().map(|c| c.re / n as f64).collect()
}

/// Scales `noise` so the target-to-noise energy ratio is `snr_db` and
/// returns `(target + scaled, scaled)`. `snr_db = +inf` gives silence.
pub fn mix_at_snr(target: &[f64], noise: &[f64], snr_db: f64) -> Result<(Vec<f64>, Vec<f64>), SimError> {
    let scale = snr_gain(target, noise, snr_db)?;
    let scaled: Vec<f64> = noise.iter().map(|v| v * scale).collect();
    let mix = target.iter().zip(&scaled).map(|(a, b)| a + b).collect();
    Ok((mix, scaled))
}

/// Gain applied to `noise` by [`mix_at_snr`].
pub(crate) fn snr_gain(target: &[f64], noise: &[f64], snr_db: f64) -> Result<f64, SimError> {
    if target.len() != noise.len() {
        return Err(SimError::Mix(format!(
            "target has {} samples, noise has {}",
            target.len(),
            noise.len()
        )));
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(SimError::Mix(format!("snr {snr_db} dB is not usable")));
    }
    let et: f64 = target.iter().map(|v| v * v).sum();
    if !(et > 0.0) {
        return Err(SimError::Mix("target has zero energy".into()));
    }
    if snr_db == f64::INFINITY {
        return Ok(0.0);
    }
    let en: f64 = noise.iter().map(|v| v * v).sum();
    if !(en > 0.0) {
        return Err(SimError::Mix("noise has zero energy".into()));
    }
    Ok((et / (en * 10f64.powf(snr_db / 10.0))).sqrt())
}
