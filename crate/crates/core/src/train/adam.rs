use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autodiff::Tensor;
use crate::model::ParamSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Moment estimates and per-tensor step counts, in parameter-set order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: Vec<u64>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: vec![0; params.len()],
        }
    }

    /// One update. Tensors whose gradient is absent or all zero are left
    /// untouched, moments and step count included.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[Tensor],
        lr: f64,
        clip_norm: Option<f64>,
    ) -> Result<(), TrainError> {
        if grads.len() != params.len() || self.t.len() != params.len() {
            return Err(TrainError::Shape(format!(
                "{} gradients / {} optimizer slots for {} parameters",
                grads.len(),
                self.t.len(),
                params.len()
            )));
        }
        let scale = match clip_norm {
            Some(c) => {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if g.shape() != p.tensor.shape() {
                return Err(TrainError::Shape(format!(
                    "gradient for '{}' is {:?}, parameter is {:?}",
                    p.name,
                    g.shape(),
                    p.tensor.shape()
                )));
            }
            if g.data().iter().all(|&x| x == 0.0) {
                continue;
            }
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1 = 1.0 - BETA1.powi(t);
            let c2 = 1.0 - BETA2.powi(t);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gr), m), v) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gr = gr * scale;
                *m = BETA1 * *m + (1.0 - BETA1) * gr;
                *v = BETA2 * *v + (1.0 - BETA2) * gr * gr;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
            }
        }
        Ok(())
    }
}
