//! Ideal ratio masks, mask post-processing, and mask application.
//!
//! Post-processing raises the estimated mask to a scalar power `alpha`
//! (fixed, or one value per frame) and floors the result at `beta`:
//! `out(t, c) = max(m(t, c)^alpha_t, beta)`. Smaller `alpha` keeps more of
//! the noisy input (less distortion, more residual noise).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::frames::{FrameMatrix, FramesError};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error(transparent)]
    Frames(#[from] FramesError),
    #[error("alpha track has {got} entries for {frames} frames")]
    AlphaLength { frames: usize, got: usize },
    #[error("invalid post-processing: {0}")]
    Invalid(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Values in [0, 1], `frames x dims`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mask(FrameMatrix);

impl Mask {
    pub fn new(values: FrameMatrix) -> Result<Self, MaskError> {
        if let Some((index, &value)) = values
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(FramesError::Range {
                what: "mask",
                index,
                value,
                constraint: "0 <= value <= 1",
            }
            .into());
        }
        Ok(Self(values))
    }

    pub fn ones(frames: usize, dims: usize) -> Self {
        Self(FrameMatrix::from_fn(frames, dims, |_, _| 1.0))
    }

    pub fn values(&self) -> &FrameMatrix {
        &self.0
    }

    pub fn frames(&self) -> usize {
        self.0.frames()
    }

    pub fn dims(&self) -> usize {
        self.0.dims()
    }

    pub fn mean(&self) -> f64 {
        self.0.data().iter().sum::<f64>() / self.0.data().len().max(1) as f64
    }
}

/// The mask scalar: one exponent for the whole utterance or one per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alpha {
    Fixed(f64),
    PerFrame(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostProcess {
    pub alpha: Alpha,
    pub beta: f64,
}

impl PostProcess {
    pub fn fixed(alpha: f64, beta: f64) -> Self {
        Self {
            alpha: Alpha::Fixed(alpha),
            beta,
        }
    }

    pub fn validate(&self) -> Result<(), MaskError> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(MaskError::Invalid(format!("beta {} outside [0, 1)", self.beta)));
        }
        match &self.alpha {
            Alpha::Fixed(a) if !(0.0..=1.0).contains(a) => {
                Err(MaskError::Invalid(format!("alpha {a} outside [0, 1]")))
            }
            Alpha::PerFrame(track) => match track.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
                Some(a) => Err(MaskError::Invalid(format!(
                    "per-frame alpha {a} outside (0, 1)"
                ))),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }
}

/// `X / (X + N)` per bin, with `0 / 0 = 0`.
pub fn ideal_ratio_mask(clean: &FrameMatrix, noise: &FrameMatrix) -> Result<Mask, MaskError> {
    let m = clean.zip_map(noise, "ideal ratio mask", |x, n| {
        let y = x + n;
        if y > 0.0 {
            x / y
        } else {
            0.0
        }
    })?;
    Mask::new(m)
}

/// `max(m^alpha, beta)`, applied per frame.
///
/// Zero mask entries stay zero for any positive `alpha` before flooring.
pub fn postprocess(estimate: &Mask, pp: &PostProcess) -> Result<Mask, MaskError> {
    pp.validate()?;
    let frames = estimate.frames();
    let alpha_at = |t: usize| match &pp.alpha {
        Alpha::Fixed(a) => *a,
        Alpha::PerFrame(track) => track[t],
    };
    if let Alpha::PerFrame(track) = &pp.alpha {
        if track.len() != frames {
            return Err(MaskError::AlphaLength {
                frames,
                got: track.len(),
            });
        }
    }
    let v = estimate.values();
    let out = FrameMatrix::from_fn(frames, v.dims(), |t, d| v.get(t, d).powf(alpha_at(t)).max(pp.beta));
    Mask::new(out)
}

/// Differentiable post-processing: `floor_max(pow(estimate, alpha), beta)`.
///
/// `alpha` is a scalar tensor or a `[frames, 1]` column broadcast over each
/// frame.
pub fn postprocess_graph(
    g: &mut Graph,
    estimate: Var,
    alpha: Var,
    beta: f64,
) -> Result<Var, MaskError> {
    if !(0.0..1.0).contains(&beta) {
        return Err(MaskError::Invalid(format!("beta {beta} outside [0, 1)")));
    }
    let scaled = g.pow(estimate, alpha)?;
    Ok(g.floor_max(scaled, beta))
}

/// Element-wise `Y * mask`.
pub fn apply_mask(noisy: &FrameMatrix, mask: &Mask) -> Result<FrameMatrix, MaskError> {
    Ok(noisy.zip_map(mask.values(), "apply mask", |y, m| y * m)?)
}

/// Splits the enhancement error `X_hat - X = X (M - 1) + N M` into
/// `(||X (1 - M)||^2, ||N M||^2)`: speech distortion and residual noise.
pub fn distortion_residual(
    clean: &FrameMatrix,
    noise: &FrameMatrix,
    mask: &Mask,
) -> Result<(f64, f64), MaskError> {
    clean.require_same_shape(noise, "distortion/residual")?;
    clean.require_same_shape(mask.values(), "distortion/residual")?;
    let mut distortion = 0.0;
    let mut residual = 0.0;
    for ((x, n), m) in clean.data().iter().zip(noise.data()).zip(mask.values().data()) {
        distortion += (x * (1.0 - m)).powi(2);
        residual += (n * m).powi(2);
    }
    Ok((distortion, residual))
}

/// Column tensor `[frames, 1]` holding a per-frame alpha track.
pub fn alpha_column(track: &[f64]) -> Tensor {
    Tensor::matrix(track.len(), 1, track.to_vec()).expect("column shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fm(rows: &[&[f64]]) -> FrameMatrix {
        let dims = rows[0].len();
        FrameMatrix::new(rows.len(), dims, rows.concat()).unwrap()
    }

    fn random_pair(seed: u64, frames: usize, dims: usize) -> (FrameMatrix, FrameMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = || FrameMatrix::zeros(frames, dims);
        let (mut x, mut n) = (gen(), gen());
        for v in x.data_mut() {
            *v = rng.random_range(0.0..5.0);
        }
        for v in n.data_mut() {
            *v = rng.random_range(0.0..5.0);
        }
        (x, n)
    }

    #[test]
    fn irm_examples() {
        let m = ideal_ratio_mask(&fm(&[&[3.0, 0.0]]), &fm(&[&[1.0, 0.0]])).unwrap();
        assert_eq!(m.values().data(), &[0.75, 0.0]);
        assert!(ideal_ratio_mask(&fm(&[&[1.0]]), &fm(&[&[1.0, 2.0]])).is_err());
    }

    #[test]
    fn irm_reconstructs_additive_mixture() {
        let (x, n) = random_pair(3, 20, 8);
        let y = x.zip_map(&n, "mix", |a, b| a + b).unwrap();
        let m = ideal_ratio_mask(&x, &n).unwrap();
        let xh = apply_mask(&y, &m).unwrap();
        for (a, b) in xh.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn postprocess_examples() {
        let m = Mask::new(fm(&[&[0.25, 1e-6]])).unwrap();
        let out = postprocess(&m, &PostProcess::fixed(0.5, 0.01)).unwrap();
        assert!((out.values().get(0, 0) - 0.5).abs() < 1e-15);
        let out = postprocess(&m, &PostProcess::fixed(1.0, 0.01)).unwrap();
        assert_eq!(out.values().get(0, 1), 0.01);
        let out = postprocess(&m, &PostProcess::fixed(1e-6, 0.01)).unwrap();
        assert!(out.values().data().iter().all(|v| (v - 1.0).abs() < 2e-5));
    }

    #[test]
    fn postprocess_per_frame_and_length_check() {
        let m = Mask::new(fm(&[&[0.25, 0.25], &[0.25, 0.81]])).unwrap();
        let pp = PostProcess {
            alpha: Alpha::PerFrame(vec![0.5, 0.5]),
            beta: 0.0,
        };
        let out = postprocess(&m, &pp).unwrap();
        assert_eq!(out.values().row(1), &[0.5, 0.9]);
        let bad = PostProcess {
            alpha: Alpha::PerFrame(vec![0.5]),
            beta: 0.0,
        };
        assert!(matches!(
            postprocess(&m, &bad),
            Err(MaskError::AlphaLength { frames: 2, got: 1 })
        ));
        assert!(PostProcess::fixed(1.5, 0.0).validate().is_err());
        assert!(PostProcess::fixed(0.5, 1.0).validate().is_err());
    }

    #[test]
    fn identity_at_alpha_one_beta_zero() {
        let m = Mask::new(fm(&[&[0.1, 0.37, 0.99]])).unwrap();
        assert_eq!(postprocess(&m, &PostProcess::fixed(1.0, 0.0)).unwrap(), m);
    }

    #[test]
    fn apply_mask_examples() {
        let y = fm(&[&[2.0, 4.0]]);
        let m = Mask::new(fm(&[&[0.5, 0.25]])).unwrap();
        assert_eq!(apply_mask(&y, &m).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(apply_mask(&y, &Mask::ones(1, 2)).unwrap(), y);
    }

    #[test]
    fn distortion_residual_extremes() {
        let (x, n) = random_pair(5, 6, 4);
        let (d, r) = distortion_residual(&x, &n, &Mask::ones(6, 4)).unwrap();
        assert_eq!(d, 0.0);
        assert!((r - n.squared_norm()).abs() < 1e-12);
        let zero = Mask::new(FrameMatrix::zeros(6, 4)).unwrap();
        let (d, r) = distortion_residual(&x, &n, &zero).unwrap();
        assert!((d - x.squared_norm()).abs() < 1e-12);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn oracle_sweep_trades_distortion_for_residual() {
        for seed in 0..5 {
            let (x, n) = random_pair(seed, 12, 6);
            let m = ideal_ratio_mask(&x, &n).unwrap();
            let mut last = (f64::NEG_INFINITY, f64::INFINITY);
            for i in 1..=10 {
                let a = i as f64 / 10.0;
                let post = postprocess(&m, &PostProcess::fixed(a, 0.01)).unwrap();
                let (d, r) = distortion_residual(&x, &n, &post).unwrap();
                assert!(d >= last.0 && r <= last.1, "seed {seed} alpha {a}");
                last = (d, r);
            }
        }
    }

    #[test]
    fn graph_postprocess_matches_plain() {
        let m = Mask::new(fm(&[&[0.2, 0.6], &[0.001, 0.9]])).unwrap();
        let track = vec![0.3, 0.8];
        let plain = postprocess(
            &m,
            &PostProcess {
                alpha: Alpha::PerFrame(track.clone()),
                beta: 0.01,
            },
        )
        .unwrap();
        let mut g = Graph::new();
        let e = g.constant(m.values().to_tensor());
        let a = g.constant(alpha_column(&track));
        let out = postprocess_graph(&mut g, e, a, 0.01).unwrap();
        assert_eq!(g.value(out).data(), plain.values().data());
    }

    proptest! {
        #[test]
        fn postprocess_range_and_monotone(
            vals in prop::collection::vec(1e-6f64..1.0, 1..24),
            a1 in 0.01f64..1.0,
            a2 in 0.01f64..1.0,
            beta in 0.0f64..0.5,
        ) {
            let n = vals.len();
            let m = Mask::new(FrameMatrix::new(1, n, vals).unwrap()).unwrap();
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let p_lo = postprocess(&m, &PostProcess::fixed(lo, beta)).unwrap();
            let p_hi = postprocess(&m, &PostProcess::fixed(hi, beta)).unwrap();
            for (l, h) in p_lo.values().data().iter().zip(p_hi.values().data()) {
                prop_assert!(*l >= beta && *l <= 1.0);
                prop_assert!(h <= l);
            }
        }
    }
}
