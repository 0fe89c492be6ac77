use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autodiff::{Graph, Var};
use crate::features::AsrFeatures;
use crate::frames::FrameMatrix;
use crate::mask::Mask;
use crate::model::{frozen_asr_encoder, ParamSet};

/// Per-step loss terms; `total = l_irm + lambda_asr * l_asr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_irm: f64,
    pub l_asr: f64,
    pub lambda_asr: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_irm: f64, l_asr: f64, lambda_asr: f64) -> Self {
        Self {
            l_irm,
            l_asr,
            lambda_asr,
            total: l_irm + lambda_asr * l_asr,
        }
    }
}

/// `||M - M_hat||_1 + ||M - M_hat||_2^2`, entry-wise.
pub fn mask_loss(target: &Mask, estimate: &Mask) -> Result<f64, TrainError> {
    let (a, b) = (target.values(), estimate.values());
    a.require_same_shape(b, "mask_loss")?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x - y;
            d.abs() + d * d
        })
        .sum())
}

/// Squared Frobenius distance between two embedding sequences.
pub fn embedding_loss(clean: &FrameMatrix, enhanced: &FrameMatrix) -> Result<f64, TrainError> {
    clean.require_same_shape(enhanced, "embedding_loss")?;
    Ok(clean
        .data()
        .iter()
        .zip(enhanced.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

/// `||E(f_X) - E(f_X_hat)||_2^2` through the frozen proxy encoder.
pub fn asr_loss(clean: &AsrFeatures, enhanced: &AsrFeatures, frozen: &ParamSet) -> Result<f64, TrainError> {
    clean.values().require_same_shape(enhanced.values(), "asr_loss")?;
    let e_clean = frozen_asr_encoder(frozen, clean.values())?;
    let e_enh = frozen_asr_encoder(frozen, enhanced.values())?;
    embedding_loss(&e_clean, &e_enh)
}

pub fn mask_loss_graph(g: &mut Graph, estimate: Var, target: &Mask) -> Result<Var, TrainError> {
    let t = g.constant(target.values().to_tensor());
    let diff = g.sub(estimate, t)?;
    let l1 = g.l1_norm(diff);
    let l2 = g.squared_l2(diff);
    Ok(g.add(l1, l2)?)
}

/// `clean_embedding` enters as a constant, so only the enhanced branch
/// receives gradient.
pub fn asr_loss_graph(g: &mut Graph, enhanced_embedding: Var, clean_embedding: &FrameMatrix) -> Result<Var, TrainError> {
    let c = g.constant(clean_embedding.to_tensor());
    let diff = g.sub(enhanced_embedding, c)?;
    Ok(g.squared_l2(diff))
}
