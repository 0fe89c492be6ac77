use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};
use crate::autodiff::{Graph, Tensor, Var};

/// Standard deviation of the scalar-net weight init.
pub const ALPHA_INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    #[serde(flatten)]
    pub tensor: Tensor,
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet {
    entries: Vec<NamedTensor>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push(NamedTensor {
            name: name.into(),
            tensor,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.position(name)
            .map(|i| &self.entries[i].tensor)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, ModelError> {
        match self.position(name) {
            Some(i) => Ok(&mut self.entries[i].tensor),
            None => Err(ModelError::MissingParam(name.to_string())),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.tensor.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedTensor> {
        self.entries.iter_mut()
    }

    /// Same names, replacement values.
    pub fn with_tensors(&self, tensors: &[Tensor]) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .zip(tensors)
                .map(|(e, t)| NamedTensor {
                    name: e.name.clone(),
                    tensor: t.clone(),
                })
                .collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_finite())
    }

    /// Binds every tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound<'_> {
        Bound {
            set: self,
            vars: self.entries.iter().map(|e| g.param(e.tensor.clone())).collect(),
        }
    }

    /// Binds every tensor as a constant.
    pub fn bind_constant(&self, g: &mut Graph) -> Bound<'_> {
        Bound {
            set: self,
            vars: self.entries.iter().map(|e| g.constant(e.tensor.clone())).collect(),
        }
    }

    /// Wraps already-bound vars (in set order).
    pub fn bound_from<'a>(&'a self, vars: &[Var]) -> Bound<'a> {
        Bound {
            set: self,
            vars: vars.to_vec(),
        }
    }
}

/// Graph handles for a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound<'a> {
    set: &'a ParamSet,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.set
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Which part of the model a trainable parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    /// Mask decoder.
    Irm,
    /// Mask-scalar net.
    Alpha,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("irm.") {
            Self::Irm
        } else if name.starts_with("alpha.") {
            Self::Alpha
        } else {
            Self::Encoder
        }
    }
}

/// Trainable weights plus the frozen ASR proxy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontendParams {
    pub trainable: ParamSet,
    pub frozen_asr: ParamSet,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape")
}

fn normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std > 0");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Fan-in uniform weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn linear(set: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    set.push(format!("{name}.w"), uniform(rng, vec![fan_in, fan_out], bound));
    set.push(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
}

fn norm(set: &mut ParamSet, name: &str, dim: usize) {
    set.push(format!("{name}.g"), Tensor::full(vec![dim], 1.0));
    set.push(format!("{name}.b"), Tensor::zeros(vec![dim]));
}

pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<FrontendParams, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (u, d) = (cfg.units, cfg.mask_dim);
    let mut p = ParamSet::default();
    linear(&mut p, &mut rng, "input", 2 * d, u);
    for l in 0..cfg.layers {
        let pre = format!("layer{l}");
        norm(&mut p, &format!("{pre}.att_ln"), u);
        for m in ["q", "k", "v", "o"] {
            linear(&mut p, &mut rng, &format!("{pre}.att_{m}"), u, u);
        }
        norm(&mut p, &format!("{pre}.conv_ln"), u);
        let kbound = 1.0 / (cfg.conv_kernel as f64).sqrt();
        p.push(format!("{pre}.conv_dw.k"), uniform(&mut rng, vec![cfg.conv_kernel, u], kbound));
        p.push(format!("{pre}.conv_dw.b"), Tensor::zeros(vec![u]));
        linear(&mut p, &mut rng, &format!("{pre}.conv_pw"), u, u);
        norm(&mut p, &format!("{pre}.ffn_ln"), u);
        linear(&mut p, &mut rng, &format!("{pre}.ffn_in"), u, cfg.ffn_dim);
        linear(&mut p, &mut rng, &format!("{pre}.ffn_out"), cfg.ffn_dim, u);
    }
    norm(&mut p, "final_ln", u);
    linear(&mut p, &mut rng, "irm", u, d);
    p.push("alpha.w", normal(&mut rng, vec![u, 1], ALPHA_INIT_STD));
    p.push("alpha.b", Tensor::zeros(vec![1]));
    Ok(FrontendParams {
        trainable: p,
        frozen_asr: frozen_asr_params(cfg),
    })
}

/// Seed-derived weights of the frozen proxy, independent of the model seed.
pub fn frozen_asr_params(cfg: &ModelConfig) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.asr_seed);
    let (d, h) = (cfg.mask_dim, cfg.asr_units);
    let mut p = ParamSet::default();
    p.push("asr.in.w", normal(&mut rng, vec![d, h], 1.0 / (d as f64).sqrt()));
    p.push("asr.in.b", normal(&mut rng, vec![h], 0.1));
    p.push("asr.conv.k", normal(&mut rng, vec![cfg.asr_kernel, h], 1.0 / (cfg.asr_kernel as f64).sqrt()));
    p.push("asr.out.w", normal(&mut rng, vec![h, h], 1.0 / (h as f64).sqrt()));
    p.push("asr.out.b", normal(&mut rng, vec![h], 0.1));
    p
}
