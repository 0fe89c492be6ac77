use super::{asr_loss_graph, mask_loss_graph, TrainError};
use crate::autodiff::{grad_check, AutodiffError, GradReport, Graph, Var};
use crate::model::{frozen_asr_encoder, AlphaMode, Frontend, FrontendParams};
use crate::sim::TrainingExample;

/// Central-difference check of `l_irm + lambda * l_asr` with a predicted α
/// against every trainable parameter.
pub fn frontend_grad_check(
    frontend: &Frontend,
    params: &FrontendParams,
    ex: &TrainingExample,
    lambda: f64,
    beta: f64,
    eps: f64,
) -> Result<GradReport, TrainError> {
    frontend.check_example(ex)?;
    let clean = frozen_asr_encoder(&params.frozen_asr, ex.clean_asr_features.values())?;
    let invalid = |e: &dyn std::fmt::Display| AutodiffError::Invalid {
        op: "frontend loss",
        msg: e.to_string(),
    };
    let loss = |g: &mut Graph, vars: &[Var]| -> Result<Var, AutodiffError> {
        let p = params.trainable.bound_from(vars);
        let asr = params.frozen_asr.bind_constant(g);
        let (v, emb) = frontend
            .build(g, &p, &asr, ex, AlphaMode::Predicted, beta)
            .map_err(|e| invalid(&e))?;
        let l_irm = mask_loss_graph(g, v.m_hat, &ex.target_mask).map_err(|e| invalid(&e))?;
        let l_asr = asr_loss_graph(g, emb, &clean).map_err(|e| invalid(&e))?;
        let w = g.scale(l_asr, lambda);
        g.add(l_irm, w)
    };
    Ok(grad_check(&params.trainable.tensors(), loss, eps)?)
}
