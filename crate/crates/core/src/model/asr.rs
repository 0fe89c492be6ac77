use super::{Bound, ModelError, ParamSet};
use crate::autodiff::{Graph, Var};
use crate::frames::FrameMatrix;

use super::encoder::linear;

/// Frozen ASR proxy: `tanh(conv(tanh(f W1 + b1)) W2 + b2)` with a causal
/// depthwise conv in between. Its weights are bound as constants, so no
/// gradient ever reaches them.
pub fn frozen_asr_graph(g: &mut Graph, asr: &Bound, features: Var) -> Result<Var, ModelError> {
    let h = linear(g, asr, "asr.in", features)?;
    let h = g.tanh(h);
    let h = g.causal_depthwise_conv(h, asr.var("asr.conv.k")?)?;
    let h = linear(g, asr, "asr.out", h)?;
    Ok(g.tanh(h))
}

/// Embedding sequence `[frames, asr_units]` of a stacked feature block.
pub fn frozen_asr_encoder(asr: &ParamSet, features: &FrameMatrix) -> Result<FrameMatrix, ModelError> {
    let expected = asr.get("asr.in.w")?.rows();
    if features.dims() != expected {
        return Err(ModelError::Mismatch(format!(
            "features have {} dims, ASR proxy expects {expected}",
            features.dims()
        )));
    }
    let mut g = Graph::new();
    let bound = asr.bind_constant(&mut g);
    let x = g.constant(features.to_tensor());
    let e = frozen_asr_graph(&mut g, &bound, x)?;
    Ok(FrameMatrix::from_tensor(g.value(e))?)
}
