use serde::{Deserialize, Serialize};

use super::{
    encoder_forward, frozen_asr_graph, mask_decoder, mask_scalar_net, Bound, FrontendParams,
    ModelConfig, ModelError,
};
use crate::autodiff::{Graph, Tensor, Var};
use crate::features::{AsrFeatures, FeatureConfig, NormStats, LOG_FLOOR};
use crate::frames::FrameMatrix;
use crate::mask::{postprocess_graph, Alpha, Mask};
use crate::sim::TrainingExample;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    Fixed(f64),
    Predicted,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub encoder_out: Var,
    pub m_hat: Var,
    /// Scalar (fixed) or `[frames, 1]` (predicted).
    pub alpha: Var,
    pub m_bar: Var,
    pub enhanced: Var,
    pub features: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub m_hat: Mask,
    pub alpha: Alpha,
    pub m_bar: Mask,
    pub enhanced_linear: FrameMatrix,
    pub asr_features: AsrFeatures,
}

/// Model and feature geometry plus the normalization statistics the
/// enhanced features are computed with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frontend {
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub stats: NormStats,
}

impl Frontend {
    pub fn new(model: ModelConfig, features: FeatureConfig, stats: NormStats) -> Result<Self, ModelError> {
        model.validate()?;
        features.validate()?;
        if model.mask_dim != features.stacked_dims() {
            return Err(ModelError::Mismatch(format!(
                "model mask_dim {} != n_mels {} x stack {}",
                model.mask_dim, features.n_mels, features.stack
            )));
        }
        if stats.bands() != features.n_mels {
            return Err(ModelError::Mismatch(format!(
                "stats have {} bands, features use {} mels",
                stats.bands(),
                features.n_mels
            )));
        }
        Ok(Self { model, features, stats })
    }

    pub fn check_example(&self, ex: &TrainingExample) -> Result<(), ModelError> {
        if ex.meta.mode != self.model.mode {
            return Err(ModelError::Mismatch(format!(
                "example is {:?}, model is {:?}",
                ex.meta.mode, self.model.mode
            )));
        }
        let frames = ex.frames();
        let d = self.model.mask_dim;
        let blocks = [
            ("channel a", ex.input_channels[0].values().shape()),
            ("channel b", ex.input_channels[1].values().shape()),
            ("noisy", ex.noisy_stacked.shape()),
            ("clean features", ex.clean_asr_features.values().shape()),
            ("target mask", ex.target_mask.values().shape()),
        ];
        for (what, shape) in blocks {
            if shape != (frames, d) {
                return Err(ModelError::Mismatch(format!(
                    "{what} block is {shape:?}, expected ({frames}, {d})"
                )));
            }
        }
        Ok(())
    }

    /// Builds the forward pass on `g`. `params` must be bound from the
    /// trainable set and `asr` from the frozen set.
    pub fn build(
        &self,
        g: &mut Graph,
        params: &Bound,
        asr: &Bound,
        ex: &TrainingExample,
        alpha_mode: AlphaMode,
        beta: f64,
    ) -> Result<(ForwardVars, Var), ModelError> {
        self.check_example(ex)?;
        let a = g.constant(ex.input_channels[0].values().to_tensor());
        let b = g.constant(ex.input_channels[1].values().to_tensor());
        let input = g.concat_cols(&[a, b])?;
        let encoder_out = encoder_forward(g, params, input, &self.model)?;
        let m_hat = mask_decoder(g, params, encoder_out)?;
        let alpha = match alpha_mode {
            AlphaMode::Fixed(v) => g.constant(Tensor::scalar(v)),
            AlphaMode::Predicted => mask_scalar_net(g, params, encoder_out, self.model.stop_gradient)?,
        };
        let m_bar = postprocess_graph(g, m_hat, alpha, beta)?;
        let noisy = g.constant(ex.noisy_stacked.to_tensor());
        let enhanced = g.mul(noisy, m_bar)?;
        let features = self.normalized_log(g, enhanced)?;
        let embedding = frozen_asr_graph(g, asr, features)?;
        Ok((
            ForwardVars {
                encoder_out,
                m_hat,
                alpha,
                m_bar,
                enhanced,
                features,
            },
            embedding,
        ))
    }

    /// `(log(max(x, 1e-8)) - mean) / std` on a stacked linear block.
    pub fn normalized_log(&self, g: &mut Graph, linear: Var) -> Result<Var, ModelError> {
        let (mean, inv_std) = self.stats.tiled(self.features.stack);
        let d = mean.len();
        let floored = g.floor_max(linear, LOG_FLOOR);
        let logged = g.log(floored)?;
        let mean = g.constant(Tensor::new(vec![d], mean)?);
        let inv_std = g.constant(Tensor::new(vec![d], inv_std)?);
        let centered = g.sub(logged, mean)?;
        Ok(g.mul(centered, inv_std)?)
    }

    pub fn forward(
        &self,
        params: &FrontendParams,
        ex: &TrainingExample,
        alpha_mode: AlphaMode,
        beta: f64,
    ) -> Result<ForwardOutput, ModelError> {
        let mut g = Graph::new();
        let p = params.trainable.bind_constant(&mut g);
        let asr = params.frozen_asr.bind_constant(&mut g);
        let (v, _) = self.build(&mut g, &p, &asr, ex, alpha_mode, beta)?;
        self.read_output(&g, &v, alpha_mode)
    }

    pub fn read_output(&self, g: &Graph, v: &ForwardVars, alpha_mode: AlphaMode) -> Result<ForwardOutput, ModelError> {
        let fm = |var: Var| FrameMatrix::from_tensor(g.value(var));
        let alpha = match alpha_mode {
            AlphaMode::Fixed(a) => Alpha::Fixed(a),
            AlphaMode::Predicted => Alpha::PerFrame(g.value(v.alpha).data().to_vec()),
        };
        Ok(ForwardOutput {
            m_hat: Mask::new(fm(v.m_hat)?)?,
            alpha,
            m_bar: Mask::new(fm(v.m_bar)?)?,
            enhanced_linear: fm(v.enhanced)?,
            asr_features: AsrFeatures::new(fm(v.features)?, self.features.n_mels, self.features.stack)?,
        })
    }
}
