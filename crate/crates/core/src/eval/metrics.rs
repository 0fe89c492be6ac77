use super::EvalError;
use crate::features::{AsrFeatures, FeatureConfig, NormStats, LOG_FLOOR};
use crate::frames::FrameMatrix;
use crate::model::{frozen_asr_encoder, ParamSet};

/// Reported when the enhanced Mel equals the clean one exactly.
pub const SNR_CAP_DB: f64 = 99.0;

/// `10 log10(|X|^2 / |X_hat - X|^2) - 10 log10(|X|^2 / |Y - X|^2)`, capped at
/// [`SNR_CAP_DB`].
pub fn mel_snr_improvement(clean: &FrameMatrix, noisy: &FrameMatrix, enhanced: &FrameMatrix) -> Result<f64, EvalError> {
    clean.require_same_shape(noisy, "snr improvement")?;
    clean.require_same_shape(enhanced, "snr improvement")?;
    let err = |m: &FrameMatrix| -> f64 { m.data().iter().zip(clean.data()).map(|(a, x)| (a - x) * (a - x)).sum() };
    let (e_hat, e_in) = (err(enhanced), err(noisy));
    if e_hat == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    if e_in == 0.0 {
        return Err(EvalError::Invalid("noisy input equals clean; improvement undefined".into()));
    }
    Ok((10.0 * (e_in / e_hat).log10()).min(SNR_CAP_DB))
}

/// Log-compressed, normalized stacked features of a linear stacked block.
pub fn enhanced_features(linear: &FrameMatrix, stats: &NormStats, feat: &FeatureConfig) -> Result<AsrFeatures, EvalError> {
    let (mean, inv_std) = stats.tiled(feat.stack);
    if linear.dims() != mean.len() {
        return Err(EvalError::Invalid(format!(
            "block has {} dims, stats tile to {}",
            linear.dims(),
            mean.len()
        )));
    }
    let f = FrameMatrix::from_fn(linear.frames(), linear.dims(), |t, d| {
        (linear.get(t, d).max(LOG_FLOOR).ln() - mean[d]) * inv_std[d]
    });
    Ok(AsrFeatures::new(f, feat.n_mels, feat.stack)?)
}

/// Frozen-proxy embedding distance between clean and enhanced features.
pub fn proxy_distance(frozen: &ParamSet, clean: &AsrFeatures, enhanced: &AsrFeatures) -> Result<f64, EvalError> {
    let a = frozen_asr_encoder(frozen, clean.values())?;
    let b = frozen_asr_encoder(frozen, enhanced.values())?;
    a.require_same_shape(&b, "proxy distance")?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum())
}
