use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use super::{
    alpha_mode, asr_loss_graph, lambda_schedule, mask_loss_graph, AdamState, Checkpoint, LossBreakdown, TrainError,
    CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
use crate::autodiff::{Graph, Tensor, Var};
use crate::config::ExperimentConfig;
use crate::features::NormStats;
use crate::model::{frozen_asr_encoder, init_params, AlphaMode, Bound, Frontend, FrontendParams, ParamSet};
use crate::sim::{calibrate_stats, derive_seed, make_example, SimulatorConfig, TrainingExample};

pub const METRICS_HEADER: &str = "step,l_irm,l_asr,lambda,total,mean_alpha";

const DATA_STREAM: u64 = 0xDA7A;
const BATCH_STREAM: u64 = 0xBA7C;
const INIT_STREAM: u64 = 0x1417;

/// Lazily generated training scenes. Batch membership depends only on
/// (seed, step), so a resumed run draws the same examples.
#[derive(Clone, Debug)]
pub struct ExamplePool {
    sim: SimulatorConfig,
    frontend: Frontend,
    batch_seed: u64,
    batch_size: usize,
    slots: Vec<Option<Arc<TrainingExample>>>,
}

impl ExamplePool {
    pub fn new(cfg: &ExperimentConfig, frontend: Frontend) -> Self {
        let seed = cfg.schedule.seed;
        Self {
            sim: SimulatorConfig {
                seed: derive_seed(seed, DATA_STREAM),
                ..cfg.simulator.clone()
            },
            frontend,
            batch_seed: derive_seed(seed, BATCH_STREAM),
            batch_size: cfg.training.batch_size,
            slots: vec![None; cfg.training.pool_size],
        }
    }

    /// Slot `i` holds `simulator().scene(i)`.
    pub fn simulator(&self) -> &SimulatorConfig {
        &self.sim
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn indices(&self, step: u64) -> Vec<usize> {
        let b = self.batch_size as u64;
        (0..b)
            .map(|i| (derive_seed(self.batch_seed, step * b + i) % self.slots.len() as u64) as usize)
            .collect()
    }

    pub fn batch(&mut self, step: u64) -> Result<Vec<Arc<TrainingExample>>, TrainError> {
        let idx = self.indices(step);
        let mut missing: Vec<usize> = idx.iter().copied().filter(|&i| self.slots[i].is_none()).collect();
        missing.sort_unstable();
        missing.dedup();
        let fe = &self.frontend;
        let sim = &self.sim;
        let made: Vec<(usize, TrainingExample)> = missing
            .par_iter()
            .map(|&i| Ok((i, make_example(&sim.scene(i as u64), &fe.features, &fe.stats)?)))
            .collect::<Result<_, TrainError>>()?;
        for (i, ex) in made {
            self.slots[i] = Some(Arc::new(ex));
        }
        Ok(idx.iter().map(|&i| self.slots[i].clone().expect("filled")).collect())
    }
}

/// Batch-mean loss terms on a shared graph, plus each example's α node.
#[derive(Clone, Debug)]
pub struct BatchVars {
    pub l_irm: Var,
    pub l_asr: Var,
    pub alphas: Vec<Var>,
    pub per_example: Vec<(Var, Var)>,
}

/// Builds every example of `batch` on `g` and averages the two loss terms.
pub fn batch_graph(
    g: &mut Graph,
    frontend: &Frontend,
    params: &Bound,
    asr: &Bound,
    frozen: &ParamSet,
    batch: &[&TrainingExample],
    mode: AlphaMode,
    beta: f64,
) -> Result<BatchVars, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Shape("empty batch".into()));
    }
    let mut per_example = Vec::with_capacity(batch.len());
    let mut alphas = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        let (v, emb) = frontend
            .build(g, params, asr, ex, mode, beta)
            .map_err(|source| TrainError::Forward {
                example: i,
                scene_seed: ex.meta.seed,
                source,
            })?;
        let clean = frozen_asr_encoder(frozen, ex.clean_asr_features.values())?;
        let l_irm = mask_loss_graph(g, v.m_hat, &ex.target_mask)?;
        let l_asr = asr_loss_graph(g, emb, &clean)?;
        per_example.push((l_irm, l_asr));
        alphas.push(v.alpha);
    }
    let inv = 1.0 / batch.len() as f64;
    let mut sum_irm = per_example[0].0;
    let mut sum_asr = per_example[0].1;
    for &(a, b) in &per_example[1..] {
        sum_irm = g.add(sum_irm, a)?;
        sum_asr = g.add(sum_asr, b)?;
    }
    Ok(BatchVars {
        l_irm: g.scale(sum_irm, inv),
        l_asr: g.scale(sum_asr, inv),
        alphas,
        per_example,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: LossBreakdown,
    /// Mean predicted α over the batch, or the fixed value.
    pub mean_alpha: f64,
}

impl StepReport {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{}",
            self.step, l.l_irm, l.l_asr, l.lambda_asr, l.total, self.mean_alpha
        )
    }
}

struct BatchRun {
    report: StepReport,
    grads: Option<Vec<Tensor>>,
}

fn run_batch(
    frontend: &Frontend,
    params: &FrontendParams,
    batch: &[&TrainingExample],
    step: u64,
    lambda: f64,
    mode: AlphaMode,
    beta: f64,
    want_grads: bool,
) -> Result<BatchRun, TrainError> {
    let mut g = Graph::new();
    let p = if want_grads {
        params.trainable.bind(&mut g)
    } else {
        params.trainable.bind_constant(&mut g)
    };
    let asr = params.frozen_asr.bind_constant(&mut g);
    let bv = batch_graph(&mut g, frontend, &p, &asr, &params.frozen_asr, batch, mode, beta)?;
    for (i, (&(li, la), ex)) in bv.per_example.iter().zip(batch).enumerate() {
        for (term, v) in [("l_irm", li), ("l_asr", la)] {
            let value = g.value(v).item();
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    example: i,
                    scene_seed: ex.meta.seed,
                    term,
                    value,
                });
            }
        }
    }
    let weighted = g.scale(bv.l_asr, lambda);
    let total = if lambda == 0.0 { bv.l_irm } else { g.add(bv.l_irm, weighted)? };
    let loss = LossBreakdown::new(g.value(bv.l_irm).item(), g.value(bv.l_asr).item(), lambda);
    let mean_alpha = match mode {
        AlphaMode::Fixed(a) => a,
        AlphaMode::Predicted => {
            let (mut s, mut n) = (0.0, 0usize);
            for &a in &bv.alphas {
                s += g.value(a).data().iter().sum::<f64>();
                n += g.value(a).numel();
            }
            s / n as f64
        }
    };
    let grads = if want_grads {
        let gr = g.backward(total)?;
        let tensors: Vec<Tensor> = p.vars().iter().map(|&v| gr.wrt(v)).collect();
        if let Some(bad) = tensors.iter().position(|t| !t.is_finite()) {
            return Err(TrainError::Shape(format!(
                "non-finite gradient for '{}' at step {step}",
                params.trainable.iter().nth(bad).map_or("?", |p| p.name.as_str())
            )));
        }
        Some(tensors)
    } else {
        None
    };
    Ok(BatchRun {
        report: StepReport { step, loss, mean_alpha },
        grads,
    })
}

/// Loss of `batch` at `step`'s λ and α mode without updating anything.
pub fn batch_loss(
    frontend: &Frontend,
    params: &FrontendParams,
    batch: &[&TrainingExample],
    step: u64,
    cfg: &ExperimentConfig,
) -> Result<StepReport, TrainError> {
    let lambda = lambda_schedule(step, &cfg.schedule);
    let mode = alpha_mode(step, &cfg.schedule);
    Ok(run_batch(frontend, params, batch, step, lambda, mode, cfg.training.beta, false)?.report)
}

/// Forward, backward and one Adam update; the frozen proxy is never touched.
pub fn train_step(
    frontend: &Frontend,
    params: &mut FrontendParams,
    adam: &mut AdamState,
    batch: &[&TrainingExample],
    step: u64,
    cfg: &ExperimentConfig,
) -> Result<StepReport, TrainError> {
    let sched = &cfg.schedule;
    let lambda = lambda_schedule(step, sched);
    let mode = alpha_mode(step, sched);
    let run = run_batch(frontend, params, batch, step, lambda, mode, cfg.training.beta, true)?;
    let grads = run.grads.expect("gradients requested");
    adam.step(&mut params.trainable, &grads, sched.learning_rate, cfg.training.clip_norm)?;
    Ok(run.report)
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: ExperimentConfig,
    pub frontend: Frontend,
    pub params: FrontendParams,
    pub adam: AdamState,
    /// Completed steps; the next step to run.
    pub step: u64,
    pool: ExamplePool,
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let stats = calibrate_stats(&config.simulator, &config.features, config.training.calibration_scenes)?;
        let params = init_params(&config.model, derive_seed(config.schedule.seed, INIT_STREAM))?;
        Self::assemble(config, stats, params, None, 0)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, TrainError> {
        ck.validate().map_err(|msg| TrainError::Checkpoint {
            path: "<memory>".into(),
            msg,
        })?;
        Self::assemble(ck.config, ck.stats, ck.params, Some(ck.adam), ck.step)
    }

    fn assemble(
        config: ExperimentConfig,
        stats: NormStats,
        params: FrontendParams,
        adam: Option<AdamState>,
        step: u64,
    ) -> Result<Self, TrainError> {
        let frontend = Frontend::new(config.model.clone(), config.features.clone(), stats)?;
        let pool = ExamplePool::new(&config, frontend.clone());
        Ok(Self {
            adam: adam.unwrap_or_else(|| AdamState::new(&params.trainable)),
            config,
            frontend,
            params,
            step,
            pool,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            step: self.step,
            config: self.config.clone(),
            stats: self.frontend.stats.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
        }
    }

    pub fn batch(&mut self, step: u64) -> Result<Vec<Arc<TrainingExample>>, TrainError> {
        self.pool.batch(step)
    }

    pub fn pool(&self) -> &ExamplePool {
        &self.pool
    }

    pub fn step_once(&mut self) -> Result<StepReport, TrainError> {
        let batch = self.pool.batch(self.step)?;
        let refs: Vec<&TrainingExample> = batch.iter().map(|e| e.as_ref()).collect();
        let report = train_step(&self.frontend, &mut self.params, &mut self.adam, &refs, self.step, &self.config)?;
        self.step += 1;
        Ok(report)
    }

    /// Runs steps until `self.step == end`, calling `on_step` after each.
    pub fn run_until(
        &mut self,
        end: u64,
        mut on_step: impl FnMut(&Self, &StepReport) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        while self.step < end {
            let r = self.step_once()?;
            on_step(self, &r)?;
        }
        Ok(())
    }
}

/// Appends step rows to `metrics.csv`.
pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    /// Starts a fresh log, or keeps the rows before `resume_step` of an
    /// existing one.
    pub fn open(path: &Path, resume_step: Option<u64>) -> Result<Self, TrainError> {
        let mut kept = vec![METRICS_HEADER.to_string()];
        if let Some(step) = resume_step {
            if path.exists() {
                let f = File::open(path).map_err(|e| TrainError::io(path, e))?;
                for line in BufReader::new(f).lines().skip(1) {
                    let line = line.map_err(|e| TrainError::io(path, e))?;
                    let s: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                    if matches!(s, Some(s) if s < step) {
                        kept.push(line);
                    }
                }
            }
        }
        let f = File::create(path).map_err(|e| TrainError::io(path, e))?;
        let mut out = BufWriter::new(f);
        for line in kept {
            writeln!(out, "{line}").map_err(|e| TrainError::io(path, e))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            out,
        })
    }

    pub fn push(&mut self, r: &StepReport) -> Result<(), TrainError> {
        writeln!(self.out, "{}", r.csv_row()).map_err(|e| TrainError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        self.out.flush().map_err(|e| TrainError::io(&self.path, e))
    }
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{step:06}.json"))
}

/// Full training run into `out_dir`: `config.json`, `metrics.csv` and
/// `ckpt_NNNNNN.json` every `checkpoint_every` steps and at the end.
/// Returns the checkpoint paths written.
pub fn train(config: ExperimentConfig, out_dir: &Path, resume: Option<&Path>) -> Result<Vec<PathBuf>, TrainError> {
    std::fs::create_dir_all(out_dir).map_err(|e| TrainError::io(out_dir, e))?;
    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(Checkpoint::load(p)?)?,
        None => Trainer::new(config)?,
    };
    let cfg_path = out_dir.join("config.json");
    let text = serde_json::to_string_pretty(&trainer.config).map_err(|source| TrainError::Json {
        path: cfg_path.display().to_string(),
        source,
    })?;
    std::fs::write(&cfg_path, text + "\n").map_err(|e| TrainError::io(&cfg_path, e))?;

    let mut log = MetricsLog::open(&out_dir.join("metrics.csv"), resume.map(|_| trainer.step))?;
    let total = trainer.config.schedule.total_steps;
    let every = trainer.config.training.checkpoint_every;
    let mut written = Vec::new();
    trainer.run_until(total, |t, r| {
        log.push(r)?;
        if t.step % every == 0 || t.step == total {
            log.flush()?;
            let path = checkpoint_path(out_dir, t.step);
            t.checkpoint().save(&path)?;
            written.push(path);
        }
        Ok(())
    })?;
    log.flush()?;
    Ok(written)
}
