//! Command-line surface. Exit codes: 0 success, 1 usage or validation
//! error, 2 runtime failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{ConfigError, ExperimentConfig, Preset};
use crate::eval::{evaluate, sweep_alpha, write_sweep_csv, EvalError, MaskSource, SweepAlpha};
use crate::features::wav::{read_wav, write_wav};
use crate::features::{asr_feature_pipeline, mel_spectrogram, FeatureError};
use crate::frames::FrameMatrix;
use crate::model::{init_params, Frontend};
use crate::sim::{calibrate_stats, make_example, render_scene, Mode, NoiseKind, SimError};
use crate::train::{frontend_grad_check, train, Checkpoint, TrainError};

#[derive(Debug, Parser)]
#[command(name = "maskscalar", version, about = "Mask-scalar prediction frontend: simulate, train, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON overlay merged onto the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk", global = true)]
    pub preset: Preset,
    /// Overrides model.mode and simulator.mode.
    #[arg(long, value_enum, global = true)]
    pub mode: Option<CliMode>,
    /// Output directory.
    #[arg(long, default_value = "out", global = true)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum CliMode {
    Enhancement,
    Aec,
}

impl From<CliMode> for Mode {
    fn from(m: CliMode) -> Self {
        match m {
            CliMode::Enhancement => Mode::Enhancement,
            CliMode::Aec => Mode::Aec,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render scenes to WAV files plus a JSON manifest.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        count: u64,
        /// Fixed SNR (or SER in AEC mode) instead of the configured range.
        #[arg(long, allow_hyphen_values = true)]
        snr_db: Option<f64>,
    },
    /// Train and write checkpoints plus metrics.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint (its stored config is used).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-bucket metrics of a checkpoint as eval.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// A fixed value in (0, 1] or `predicted`; defaults to the schedule's mode.
        #[arg(long)]
        alpha: Option<SweepAlpha>,
    },
    /// Fixed-α sweep as sweep.csv.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        /// Use the ideal ratio mask.
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        oracle: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated grid; defaults to eval.sweep_alphas.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        /// Also report the checkpoint's predicted α.
        #[arg(long, requires = "checkpoint")]
        predicted: bool,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        snr_db: Option<f64>,
    },
    /// Finite-difference check of the full frontend loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Check E1/E2 in both input topologies instead of the configured one.
        #[arg(long)]
        all_variants: bool,
        #[arg(long, default_value_t = 0.1)]
        duration: f64,
        #[arg(long, default_value_t = 3e-3)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Mel and normalized ASR features of a WAV file or a simulated scene.
    Features {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        wav: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug)]
pub enum CliError {
    /// Argument parsing failure, already rendered by clap.
    Usage(String),
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Validation(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) => f.write_str(m.trim_end()),
            Self::Validation(m) => write!(f, "invalid input: {m}"),
            Self::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Checkpoint { .. } | TrainError::Json { .. } => {
                Self::Validation(e.to_string())
            }
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::Config(_) | EvalError::Invalid(_) => Self::Validation(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) => Self::Validation(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        Self::Runtime(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let cfg = ExperimentConfig::load(self.preset, self.config.as_deref())?;
        let cfg = match self.mode {
            Some(m) => cfg.with_mode(m.into()),
            None => cfg,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", self.out.display())))?;
        Ok(&self.out)
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    write_text(path, &(text + "\n"))
}

fn write_matrix(path: &Path, m: &FrameMatrix) -> Result<(), CliError> {
    let mut buf = Vec::new();
    m.write_csv(&mut buf).map_err(runtime)?;
    std::fs::write(path, buf).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Parses `args` and runs the command, writing human output to `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            write!(stdout, "{e}").map_err(runtime)?;
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.render().to_string())),
    };
    match cli.command {
        Command::Simulate { common, count, snr_db } => simulate(&common, count, snr_db, stdout),
        Command::Train { common, resume } => {
            let cfg = common.load()?;
            let out = common.out_dir()?;
            let written = train(cfg, out, resume.as_deref())?;
            writeln!(stdout, "wrote {} checkpoints to {}", written.len(), out.display()).map_err(runtime)
        }
        Command::Eval { common, checkpoint, alpha } => {
            let cfg = common.load()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let summary = evaluate(&ck, &cfg, alpha)?;
            let out = common.out_dir()?;
            write_json(&out.join("eval.json"), &summary)?;
            for b in &summary.buckets {
                writeln!(
                    stdout,
                    "{:>6} dB  l_asr_proxy {:.4}  baseline {:.4}  snr_impr {:.2} dB  alpha {:.3} +- {:.3}",
                    b.condition_db, b.l_asr_proxy, b.baseline_l_asr_proxy, b.snr_impr_db, b.alpha_mean, b.alpha_std
                )
                .map_err(runtime)?;
            }
            Ok(())
        }
        Command::SweepAlpha {
            common,
            oracle,
            checkpoint,
            alphas,
            predicted,
            beta,
            snr_db,
        } => {
            let mut cfg = common.load()?;
            if let Some(s) = snr_db {
                cfg.eval.sweep_snr_db = s;
            }
            let source = if oracle {
                MaskSource::Oracle
            } else {
                let path = checkpoint.expect("clap enforces --oracle or --checkpoint");
                MaskSource::Checkpoint(Box::new(Checkpoint::load(&path)?))
            };
            let mut grid: Vec<SweepAlpha> = alphas
                .unwrap_or_else(|| cfg.eval.sweep_alphas.clone())
                .into_iter()
                .map(SweepAlpha::Fixed)
                .collect();
            if predicted {
                grid.push(SweepAlpha::Predicted);
            }
            let rows = sweep_alpha(&source, &cfg, &grid, beta.unwrap_or(cfg.eval.beta))?;
            let mut buf = Vec::new();
            write_sweep_csv(&rows, &mut buf).map_err(runtime)?;
            let out = common.out_dir()?;
            std::fs::write(out.join("sweep.csv"), &buf).map_err(runtime)?;
            stdout.write_all(&buf).map_err(runtime)
        }
        Command::Gradcheck {
            common,
            all_variants,
            duration,
            eps,
            tol,
            seed,
        } => gradcheck(&common, all_variants, duration, eps, tol, seed, stdout),
        Command::Features { common, wav, seed } => features(&common, wav.as_deref(), seed, stdout),
    }
}

#[derive(Serialize)]
struct ManifestEntry {
    index: u64,
    scene: crate::sim::SceneConfig,
    files: Vec<String>,
    cross_term_db: f64,
    cleaner_passthrough: bool,
}

fn simulate(common: &Common, count: u64, snr_db: Option<f64>, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = common.load()?;
    let out = common.out_dir()?;
    let stats = calibrate_stats(&cfg.simulator, &cfg.features, cfg.training.calibration_scenes)?;
    let sr = cfg.simulator.sample_rate;
    let mut manifest = Vec::new();
    for i in 0..count {
        let mut sc = cfg.simulator.scene(i);
        if let Some(s) = snr_db {
            sc.snr_db = s;
        }
        let scene = render_scene(&sc)?;
        let ex = make_example(&sc, &cfg.features, &stats)?;
        let mut files = Vec::new();
        let mut signals: Vec<(&str, &[f64])> = vec![
            ("clean", &scene.clean),
            ("interference", &scene.interference),
            ("mic", &scene.mic),
        ];
        if let Some(r) = &scene.reference {
            signals.push(("loopback", r));
        }
        if !scene.context.is_empty() {
            signals.push(("context", &scene.context));
        }
        for (name, s) in signals {
            let file = format!("scene_{i:04}_{name}.wav");
            write_wav(&out.join(&file), sr, s)?;
            files.push(file);
        }
        manifest.push(ManifestEntry {
            index: i,
            scene: sc,
            files,
            cross_term_db: ex.cross_term_db,
            cleaner_passthrough: ex.cleaner_passthrough,
        });
    }
    write_json(&out.join("manifest.json"), &manifest)?;
    writeln!(stdout, "wrote {count} scenes to {}", out.display()).map_err(runtime)
}

#[derive(Serialize)]
struct GradcheckRow {
    mode: Mode,
    stop_gradient: bool,
    max_rel_error: f64,
    checked: usize,
    worst_param: String,
}

#[allow(clippy::too_many_arguments)]
fn gradcheck(
    common: &Common,
    all_variants: bool,
    duration: f64,
    eps: f64,
    tol: f64,
    seed: u64,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let base = common.load()?;
    let variants: Vec<(Mode, bool)> = if all_variants {
        vec![
            (Mode::Enhancement, true),
            (Mode::Enhancement, false),
            (Mode::Aec, true),
            (Mode::Aec, false),
        ]
    } else {
        vec![(base.model.mode, base.model.stop_gradient)]
    };
    let mut rows = Vec::new();
    for (mode, sg) in variants {
        let mut cfg = base.clone().with_mode(mode);
        cfg.model.stop_gradient = sg;
        cfg.simulator.duration = duration;
        cfg.simulator.noise_context = duration / 2.0;
        let stats = calibrate_stats(&cfg.simulator, &cfg.features, 4)?;
        let fe = Frontend::new(cfg.model.clone(), cfg.features.clone(), stats).map_err(runtime)?;
        let sc = cfg.simulator.scene_with(seed, 0.0, NoiseKind::Pink, 0.2);
        let ex = make_example(&sc, &fe.features, &fe.stats)?;
        let params = init_params(&cfg.model, seed).map_err(runtime)?;
        let r = frontend_grad_check(&fe, &params, &ex, cfg.schedule.lambda_max, cfg.training.beta, eps)?;
        let worst = r
            .worst_param_index
            .first()
            .and_then(|&i| params.trainable.iter().nth(i))
            .map_or_else(String::new, |p| p.name.clone());
        writeln!(
            stdout,
            "{mode:?} stop_gradient={sg}: max rel error {:e} over {} elements (worst: {worst} {:?}, analytic {:e}, numeric {:e})",
            r.max_rel_error, r.checked, r.worst_param_index, r.analytic, r.numeric
        )
        .map_err(runtime)?;
        rows.push(GradcheckRow {
            mode,
            stop_gradient: sg,
            max_rel_error: if r.non_finite { f64::INFINITY } else { r.max_rel_error },
            checked: r.checked,
            worst_param: worst,
        });
    }
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    writeln!(stdout, "max rel error {worst:e}").map_err(runtime)?;
    let out = common.out_dir()?;
    write_json(&out.join("gradcheck.json"), &rows)?;
    if worst < tol {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("max rel error {worst:e} >= {tol:e}")))
    }
}

fn features(common: &Common, wav: Option<&Path>, seed: u64, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = common.load()?;
    let wave = match wav {
        Some(p) => {
            let audio = read_wav(p)?;
            if audio.sample_rate != cfg.features.sample_rate {
                return Err(CliError::Validation(format!(
                    "{}: sample rate {} differs from features.sample_rate {}",
                    p.display(),
                    audio.sample_rate,
                    cfg.features.sample_rate
                )));
            }
            audio.channels.into_iter().next().unwrap_or_default()
        }
        None => render_scene(&cfg.simulator.scene(seed))?.mic,
    };
    let stats = calibrate_stats(&cfg.simulator, &cfg.features, cfg.training.calibration_scenes)?;
    let mel = mel_spectrogram(&wave, &cfg.features)?;
    let feats = asr_feature_pipeline(&mel, &stats, &cfg.features)?;
    let out = common.out_dir()?;
    write_matrix(&out.join("mel.csv"), mel.values())?;
    write_matrix(&out.join("features.csv"), feats.values())?;
    write_json(&out.join("stats.json"), &stats)?;
    writeln!(
        stdout,
        "{} mel frames x {} bands -> {} feature frames x {} dims",
        mel.frames(),
        mel.bands(),
        feats.frames(),
        feats.dims()
    )
    .map_err(runtime)
}
