use super::SimError;
use crate::features::MelSpectrogram;
use crate::frames::FrameMatrix;

/// Floor of the subtraction as a fraction of the mixture magnitude.
pub const CLEANER_FLOOR: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct CleanerOutput {
    pub mel: MelSpectrogram,
    /// Set when the noise context had no frames and the mixture was passed
    /// through unchanged.
    pub passthrough: bool,
}

/// Mel-domain spectral subtraction: per band, subtract the mean context
/// magnitude and floor the result at `0.05 * mixture`.
pub fn stub_cleaner(mixture: &MelSpectrogram, context: &MelSpectrogram) -> Result<CleanerOutput, SimError> {
    if context.bands() != mixture.bands() {
        return Err(SimError::Config(format!(
            "mixture has {} bands, noise context has {}",
            mixture.bands(),
            context.bands()
        )));
    }
    if context.frames() == 0 {
        return Ok(CleanerOutput {
            mel: mixture.clone(),
            passthrough: true,
        });
    }
    let bands = context.bands();
    let mut mean = vec![0.0; bands];
    for t in 0..context.frames() {
        for (m, v) in mean.iter_mut().zip(context.values().row(t)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= context.frames() as f64);
    let y = mixture.values();
    let out = FrameMatrix::from_fn(y.frames(), bands, |t, b| {
        let v = y.get(t, b);
        (v - mean[b]).max(CLEANER_FLOOR * v)
    });
    Ok(CleanerOutput {
        mel: MelSpectrogram::new(out)?,
        passthrough: false,
    })
}
