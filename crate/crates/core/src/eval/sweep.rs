use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{enhanced_features, mel_snr_improvement, proxy_distance, EvalError};
use crate::config::ExperimentConfig;
use crate::mask::{apply_mask, distortion_residual, postprocess, Alpha, Mask, PostProcess};
use crate::model::{frozen_asr_params, AlphaMode, Frontend, FrontendParams, ParamSet};
use crate::sim::{calibrate_stats, make_example, Mode, SimulatorConfig, TrainingExample};
use crate::train::{alpha_mode, mask_loss, Checkpoint};

pub const SWEEP_HEADER: &str = "alpha,beta,distortion,residual,l_asr_proxy,snr_impr_db,n";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAlpha {
    Fixed(f64),
    Predicted,
}

impl fmt::Display for SweepAlpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fixed(a) => write!(f, "{a}"),
            Self::Predicted => f.write_str("predicted"),
        }
    }
}

impl FromStr for SweepAlpha {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "predicted" {
            return Ok(Self::Predicted);
        }
        let a: f64 = s.parse().map_err(|_| format!("alpha '{s}' is neither a number nor 'predicted'"))?;
        if a > 0.0 && a <= 1.0 {
            Ok(Self::Fixed(a))
        } else {
            Err(format!("alpha {a} outside (0, 1]"))
        }
    }
}

impl From<AlphaMode> for SweepAlpha {
    fn from(m: AlphaMode) -> Self {
        match m {
            AlphaMode::Fixed(a) => Self::Fixed(a),
            AlphaMode::Predicted => Self::Predicted,
        }
    }
}

/// Where estimated masks come from.
#[derive(Clone, Debug)]
pub enum MaskSource {
    /// The ideal ratio mask of each scene.
    Oracle,
    Checkpoint(Box<Checkpoint>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: SweepAlpha,
    pub beta: f64,
    pub distortion: f64,
    pub residual: f64,
    pub l_asr_proxy: f64,
    pub snr_impr_db: f64,
    pub n: usize,
}

impl SweepRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.alpha, self.beta, self.distortion, self.residual, self.l_asr_proxy, self.snr_impr_db, self.n
        )
    }
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// `n` scenes at a fixed SNR (or SER): scene `i` has the same speech, noise
/// kind and room for every condition.
pub fn eval_set(cfg: &ExperimentConfig, frontend: &Frontend, condition_db: f64) -> Result<Vec<TrainingExample>, EvalError> {
    let sim = SimulatorConfig {
        seed: cfg.eval.seed,
        ..cfg.simulator.clone()
    };
    (0..cfg.eval.scenes_per_bucket as u64)
        .into_par_iter()
        .map(|i| {
            let mut sc = sim.scene(i);
            sc.snr_db = condition_db;
            Ok(make_example(&sc, &frontend.features, &frontend.stats)?)
        })
        .collect()
}

struct Context {
    frontend: Frontend,
    params: Option<FrontendParams>,
    frozen: ParamSet,
}

impl Context {
    fn new(source: &MaskSource, cfg: &ExperimentConfig) -> Result<Self, EvalError> {
        match source {
            MaskSource::Oracle => {
                let stats = calibrate_stats(&cfg.simulator, &cfg.features, cfg.training.calibration_scenes)?;
                Ok(Self {
                    frontend: Frontend::new(cfg.model.clone(), cfg.features.clone(), stats)?,
                    params: None,
                    frozen: frozen_asr_params(&cfg.model),
                })
            }
            MaskSource::Checkpoint(ck) => {
                check_compatible(cfg, &ck.config)?;
                Ok(Self {
                    frontend: ck.frontend()?,
                    frozen: ck.params.frozen_asr.clone(),
                    params: Some(ck.params.clone()),
                })
            }
        }
    }

    /// Estimated mask and, for a predicted α, the per-frame track.
    fn estimate(&self, ex: &TrainingExample, alpha: SweepAlpha, beta: f64) -> Result<(Mask, Alpha), EvalError> {
        match (&self.params, alpha) {
            (None, SweepAlpha::Fixed(a)) => Ok((ex.target_mask.clone(), Alpha::Fixed(a))),
            (None, SweepAlpha::Predicted) => {
                Err(EvalError::Invalid("a predicted alpha needs a checkpoint source".into()))
            }
            (Some(p), SweepAlpha::Fixed(a)) => {
                let out = self.frontend.forward(p, ex, AlphaMode::Fixed(a), beta)?;
                Ok((out.m_hat, out.alpha))
            }
            (Some(p), SweepAlpha::Predicted) => {
                let out = self.frontend.forward(p, ex, AlphaMode::Predicted, beta)?;
                Ok((out.m_hat, out.alpha))
            }
        }
    }
}

/// Per-example metrics under one α setting.
#[derive(Clone, Debug)]
struct ExampleMetrics {
    l_irm: f64,
    distortion: f64,
    residual: f64,
    l_asr_proxy: f64,
    baseline_l_asr_proxy: f64,
    snr_impr_db: f64,
    alphas: Vec<f64>,
}

fn example_metrics(ctx: &Context, ex: &TrainingExample, alpha: SweepAlpha, beta: f64) -> Result<ExampleMetrics, EvalError> {
    let (m_hat, track) = ctx.estimate(ex, alpha, beta)?;
    let m_bar = postprocess(&m_hat, &PostProcess { alpha: track.clone(), beta })?;
    let x_hat = apply_mask(&ex.noisy_stacked, &m_bar)?;
    let (distortion, residual) = distortion_residual(&ex.clean_stacked, &ex.interference_stacked, &m_bar)?;
    let fe = &ctx.frontend;
    let enhanced = enhanced_features(&x_hat, &fe.stats, &fe.features)?;
    let baseline = enhanced_features(&ex.noisy_stacked, &fe.stats, &fe.features)?;
    let alphas = match track {
        Alpha::Fixed(a) => vec![a; ex.frames()],
        Alpha::PerFrame(v) => v,
    };
    Ok(ExampleMetrics {
        l_irm: mask_loss(&ex.target_mask, &m_hat)?,
        distortion,
        residual,
        l_asr_proxy: proxy_distance(&ctx.frozen, &ex.clean_asr_features, &enhanced)?,
        baseline_l_asr_proxy: proxy_distance(&ctx.frozen, &ex.clean_asr_features, &baseline)?,
        snr_impr_db: mel_snr_improvement(&ex.clean_stacked, &ex.noisy_stacked, &x_hat)?,
        alphas,
    })
}

fn run(ctx: &Context, set: &[TrainingExample], alpha: SweepAlpha, beta: f64) -> Result<Vec<ExampleMetrics>, EvalError> {
    set.par_iter().map(|ex| example_metrics(ctx, ex, alpha, beta)).collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    s / n as f64
}

/// Means over the eval set at `cfg.eval.sweep_snr_db`, one row per α.
pub fn sweep_alpha(
    source: &MaskSource,
    cfg: &ExperimentConfig,
    alphas: &[SweepAlpha],
    beta: f64,
) -> Result<Vec<SweepRow>, EvalError> {
    if alphas.is_empty() {
        return Err(EvalError::Invalid("empty alpha grid".into()));
    }
    for a in alphas {
        if let SweepAlpha::Fixed(v) = a {
            if !(*v > 0.0 && *v <= 1.0) {
                return Err(EvalError::Invalid(format!("alpha {v} outside (0, 1]")));
            }
        }
    }
    let ctx = Context::new(source, cfg)?;
    let set = eval_set(cfg, &ctx.frontend, cfg.eval.sweep_snr_db)?;
    alphas
        .iter()
        .map(|&a| {
            let m = run(&ctx, &set, a, beta)?;
            Ok(SweepRow {
                alpha: a,
                beta,
                distortion: mean(m.iter().map(|e| e.distortion)),
                residual: mean(m.iter().map(|e| e.residual)),
                l_asr_proxy: mean(m.iter().map(|e| e.l_asr_proxy)),
                snr_impr_db: mean(m.iter().map(|e| e.snr_impr_db)),
                n: m.len(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketSummary {
    pub condition_db: f64,
    pub n: usize,
    pub l_irm: f64,
    pub l_asr_proxy: f64,
    /// Proxy distance of the unmasked mixture.
    pub baseline_l_asr_proxy: f64,
    pub distortion: f64,
    pub residual: f64,
    pub snr_impr_db: f64,
    pub alpha_mean: f64,
    pub alpha_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub step: u64,
    pub mode: Mode,
    pub alpha: SweepAlpha,
    pub beta: f64,
    pub buckets: Vec<BucketSummary>,
}

/// Per-bucket means for a checkpoint. Without an explicit `alpha`, the mode
/// the schedule used for the checkpoint's last step is evaluated.
pub fn evaluate(ck: &Checkpoint, cfg: &ExperimentConfig, alpha: Option<SweepAlpha>) -> Result<EvalSummary, EvalError> {
    let alpha = alpha.unwrap_or_else(|| alpha_mode(ck.step.saturating_sub(1), &ck.config.schedule).into());
    let source = MaskSource::Checkpoint(Box::new(ck.clone()));
    let ctx = Context::new(&source, cfg)?;
    let beta = cfg.eval.beta;
    let buckets = cfg
        .eval
        .buckets(cfg.simulator.mode)
        .iter()
        .map(|&c| {
            let set = eval_set(cfg, &ctx.frontend, c)?;
            let m = run(&ctx, &set, alpha, beta)?;
            let all: Vec<f64> = m.iter().flat_map(|e| e.alphas.iter().copied()).collect();
            let a_mean = mean(all.iter().copied());
            let a_var = mean(all.iter().map(|a| (a - a_mean) * (a - a_mean)));
            Ok(BucketSummary {
                condition_db: c,
                n: m.len(),
                l_irm: mean(m.iter().map(|e| e.l_irm)),
                l_asr_proxy: mean(m.iter().map(|e| e.l_asr_proxy)),
                baseline_l_asr_proxy: mean(m.iter().map(|e| e.baseline_l_asr_proxy)),
                distortion: mean(m.iter().map(|e| e.distortion)),
                residual: mean(m.iter().map(|e| e.residual)),
                snr_impr_db: mean(m.iter().map(|e| e.snr_impr_db)),
                alpha_mean: a_mean,
                alpha_std: a_var.sqrt(),
            })
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(EvalSummary {
        step: ck.step,
        mode: cfg.simulator.mode,
        alpha,
        beta,
        buckets,
    })
}

/// The eval config must describe the geometry the checkpoint was trained with.
fn check_compatible(cfg: &ExperimentConfig, trained: &ExperimentConfig) -> Result<(), EvalError> {
    let mut bad = Vec::new();
    if cfg.features != trained.features {
        bad.push("features");
    }
    if cfg.model != trained.model {
        bad.push("model");
    }
    if cfg.simulator.mode != trained.simulator.mode {
        bad.push("simulator.mode");
    }
    if cfg.simulator.sample_rate != trained.simulator.sample_rate {
        bad.push("simulator.sample_rate");
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(EvalError::Invalid(format!(
            "config does not match the checkpoint in: {}",
            bad.join(", ")
        )))
    }
}
