use super::{Bound, ModelConfig, ModelError};
use crate::autodiff::{Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Additive attention mask: 0 on `[t - left_context, t]`, `-inf` elsewhere.
pub fn causal_attention_mask(frames: usize, left_context: usize) -> Tensor {
    let mut m = vec![f64::NEG_INFINITY; frames * frames];
    for t in 0..frames {
        for s in t.saturating_sub(left_context)..=t {
            m[t * frames + s] = 0.0;
        }
    }
    Tensor::matrix(frames, frames, m).expect("square")
}

/// `x W + b` for parameters `{name}.w`, `{name}.b`.
pub(crate) fn linear(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var, ModelError> {
    let xw = g.matmul(x, p.var(&format!("{name}.w"))?)?;
    Ok(g.add(xw, p.var(&format!("{name}.b"))?)?)
}

fn norm(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var, ModelError> {
    let gain = p.var(&format!("{name}.g"))?;
    let bias = p.var(&format!("{name}.b"))?;
    Ok(g.layer_norm(x, gain, bias, LN_EPS)?)
}

fn attention(g: &mut Graph, p: &Bound, pre: &str, x: Var, mask: &Tensor, cfg: &ModelConfig) -> Result<Var, ModelError> {
    let q = linear(g, p, &format!("{pre}.att_q"), x)?;
    let k = linear(g, p, &format!("{pre}.att_k"), x)?;
    let v = linear(g, p, &format!("{pre}.att_v"), x)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let weights = g.masked_softmax(scores, mask)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let ctx = g.concat_cols(&heads)?;
    linear(g, p, &format!("{pre}.att_o"), ctx)
}

/// Causal encoder: input projection, `layers` blocks of (attention, causal
/// depthwise conv, FFN), each pre-norm with a residual, then a final norm.
///
/// `input` is `[frames, 2 * mask_dim]`; the result is `[frames, units]`.
pub fn encoder_forward(g: &mut Graph, p: &Bound, input: Var, cfg: &ModelConfig) -> Result<Var, ModelError> {
    let shape = g.shape(input).to_vec();
    let frames = match shape.as_slice() {
        [t, c] if *c == 2 * cfg.mask_dim => *t,
        _ => {
            return Err(ModelError::Mismatch(format!(
                "encoder input {shape:?}, expected [frames, {}]",
                2 * cfg.mask_dim
            )))
        }
    };
    let mask = causal_attention_mask(frames, cfg.left_context);
    let mut h = linear(g, p, "input", input)?;
    for l in 0..cfg.layers {
        let pre = format!("layer{l}");

        let a = norm(g, p, &format!("{pre}.att_ln"), h)?;
        let a = attention(g, p, &pre, a, &mask, cfg)?;
        h = g.add(h, a)?;

        let c = norm(g, p, &format!("{pre}.conv_ln"), h)?;
        let c = g.causal_depthwise_conv(c, p.var(&format!("{pre}.conv_dw.k"))?)?;
        let c = g.add(c, p.var(&format!("{pre}.conv_dw.b"))?)?;
        let c = g.swish(c)?;
        let c = linear(g, p, &format!("{pre}.conv_pw"), c)?;
        h = g.add(h, c)?;

        let f = norm(g, p, &format!("{pre}.ffn_ln"), h)?;
        let f = linear(g, p, &format!("{pre}.ffn_in"), f)?;
        let f = g.swish(f)?;
        let f = linear(g, p, &format!("{pre}.ffn_out"), f)?;
        h = g.add(h, f)?;
    }
    norm(g, p, "final_ln", h)
}

/// `M_hat = sigmoid(e W_irm + b_irm)`.
pub fn mask_decoder(g: &mut Graph, p: &Bound, e: Var) -> Result<Var, ModelError> {
    let z = linear(g, p, "irm", e)?;
    Ok(g.sigmoid(z))
}

/// Per-frame `alpha(t) = sigmoid(sg(e_t) w + b)` as a `[frames, 1]` column.
/// With `stop_gradient = false` the encoder also receives this branch's
/// gradient.
pub fn mask_scalar_net(g: &mut Graph, p: &Bound, e: Var, stop_gradient: bool) -> Result<Var, ModelError> {
    let e = if stop_gradient { g.stop_gradient(e) } else { e };
    let z = linear(g, p, "alpha", e)?;
    Ok(g.sigmoid(z))
}
