use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::room::snr_gain;
use super::{
    convolve, derive_seed, rir_generate, stub_cleaner, synth_noise, synth_speech, Mode, SceneConfig,
    SimError, SimulatorConfig,
};
use crate::features::{
    asr_feature_pipeline, mel_spectrogram, normalization_stats, stack_subsample, AsrFeatures,
    FeatureConfig, MelSpectrogram, NormStats,
};
use crate::frames::FrameMatrix;
use crate::mask::{ideal_ratio_mask, Mask};

const SPEECH_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const RIR_STREAM: u64 = 3;
const ECHO_RIR_STREAM: u64 = 4;
const CALIBRATION_STREAM: u64 = 0xCA11_B8A7;

/// Time-domain signals of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    /// Reverberant target.
    pub clean: Vec<f64>,
    /// Scaled noise (enhancement) or echo (AEC) at the microphone.
    pub interference: Vec<f64>,
    pub mic: Vec<f64>,
    /// Loopback reference, AEC only.
    pub reference: Option<Vec<f64>>,
    /// Noise preceding the utterance, enhancement only.
    pub context: Vec<f64>,
}

pub fn render_scene(cfg: &SceneConfig) -> Result<Scene, SimError> {
    cfg.validate()?;
    let n = cfg.samples();
    let sr = cfg.sample_rate;
    let speech = synth_speech(cfg.duration, sr, derive_seed(cfg.seed, SPEECH_STREAM))?;
    let h = rir_generate(cfg.rir_length, cfg.rir_decay, derive_seed(cfg.seed, RIR_STREAM))?;
    let mut clean = convolve(&speech.samples, &h);
    clean.truncate(n);

    let noise_seed = derive_seed(cfg.seed, NOISE_STREAM);
    let (interference, reference, context) = match cfg.mode {
        Mode::Enhancement => {
            let ctx = cfg.context_samples();
            let total = (ctx + n) as f64 / sr as f64;
            let noise = synth_noise(cfg.noise_kind, total, sr, noise_seed)?;
            let (pre, utt) = noise.split_at(ctx);
            let g = snr_gain(&clean, utt, cfg.snr_db)?;
            let scale = |s: &[f64]| s.iter().map(|v| v * g).collect::<Vec<_>>();
            (scale(utt), None, scale(pre))
        }
        Mode::Aec => {
            let loopback = synth_noise(cfg.noise_kind, cfg.duration, sr, noise_seed)?;
            let h_echo =
                rir_generate(cfg.rir_length, cfg.rir_decay, derive_seed(cfg.seed, ECHO_RIR_STREAM))?;
            let mut echo = convolve(&loopback, &h_echo);
            echo.truncate(n);
            let g = snr_gain(&clean, &echo, cfg.snr_db)?;
            let echo = echo.iter().map(|v| v * g).collect();
            let reference = loopback.iter().map(|v| v * g).collect();
            (echo, Some(reference), Vec::new())
        }
    };
    let mic = clean.iter().zip(&interference).map(|(a, b)| a + b).collect();
    Ok(Scene {
        config: cfg.clone(),
        clean,
        interference,
        mic,
        reference,
        context,
    })
}

/// Linear Mel spectrograms of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneMels {
    pub clean: MelSpectrogram,
    pub interference: MelSpectrogram,
    /// Mel of the waveform mixture.
    pub mic: MelSpectrogram,
    /// Cleaner output (enhancement) or loopback (AEC).
    pub channel_a: MelSpectrogram,
    pub cleaner_passthrough: bool,
}

pub fn scene_mels(scene: &Scene, feat: &FeatureConfig) -> Result<SceneMels, SimError> {
    if scene.config.sample_rate != feat.sample_rate {
        return Err(SimError::Config(format!(
            "scene sample rate {} differs from feature rate {}",
            scene.config.sample_rate, feat.sample_rate
        )));
    }
    let clean = mel_spectrogram(&scene.clean, feat)?;
    let interference = mel_spectrogram(&scene.interference, feat)?;
    let mic = mel_spectrogram(&scene.mic, feat)?;
    let (channel_a, cleaner_passthrough) = match (&scene.config.mode, &scene.reference) {
        (Mode::Aec, Some(reference)) => (mel_spectrogram(reference, feat)?, false),
        (Mode::Enhancement, None) => {
            let context = if scene.context.len() >= feat.window_samples() {
                mel_spectrogram(&scene.context, feat)?
            } else {
                MelSpectrogram::new(FrameMatrix::zeros(0, feat.n_mels))?
            };
            let out = stub_cleaner(&mic, &context)?;
            (out.mel, out.passthrough)
        }
        _ => return Err(SimError::Config("loopback present only in AEC mode".into())),
    };
    Ok(SceneMels {
        clean,
        interference,
        mic,
        channel_a,
        cleaner_passthrough,
    })
}

/// Everything the frontend needs for one utterance.
///
/// Linear blocks are in stacked geometry (`frames' x n_mels * stack`). The
/// masked signal is the additive `X_mel + N_mel`, so the oracle mask
/// reconstructs the clean block exactly; the input channels come from the
/// waveform mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    /// (cleaner or loopback, microphone), normalized log features.
    pub input_channels: [AsrFeatures; 2],
    /// Additive `X_mel + N_mel`, unstacked.
    pub noisy_linear_mel: FrameMatrix,
    pub noisy_stacked: FrameMatrix,
    pub clean_stacked: FrameMatrix,
    pub interference_stacked: FrameMatrix,
    pub target_mask: Mask,
    pub clean_asr_features: AsrFeatures,
    pub meta: SceneConfig,
    pub cleaner_passthrough: bool,
    /// `10 log10(|mel(x + n) - (mel x + mel n)|^2 / |mel x + mel n|^2)`.
    pub cross_term_db: f64,
}

impl TrainingExample {
    pub fn frames(&self) -> usize {
        self.target_mask.frames()
    }

    pub fn noisy_mel(&self) -> MelSpectrogram {
        MelSpectrogram::new(self.noisy_linear_mel.clone()).expect("sum of spectrograms is nonnegative")
    }
}

pub fn make_example(cfg: &SceneConfig, feat: &FeatureConfig, stats: &NormStats) -> Result<TrainingExample, SimError> {
    let scene = render_scene(cfg)?;
    let mels = scene_mels(&scene, feat)?;
    example_from_mels(&mels, cfg, feat, stats)
}

pub(crate) fn example_from_mels(
    mels: &SceneMels,
    cfg: &SceneConfig,
    feat: &FeatureConfig,
    stats: &NormStats,
) -> Result<TrainingExample, SimError> {
    let noisy = mels.clean.add(&mels.interference)?;
    let clean_stacked = stack_subsample(mels.clean.values(), feat);
    let interference_stacked = stack_subsample(mels.interference.values(), feat);
    let noisy_stacked = stack_subsample(noisy.values(), feat);
    let target_mask = ideal_ratio_mask(&clean_stacked, &interference_stacked)?;

    let diff: f64 = mels
        .mic
        .values()
        .data()
        .iter()
        .zip(noisy.values().data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let cross_term_db = 10.0 * (diff.max(1e-300) / noisy.values().squared_norm().max(1e-300)).log10();

    let input_channels = [
        asr_feature_pipeline(&mels.channel_a, stats, feat)?,
        asr_feature_pipeline(&mels.mic, stats, feat)?,
    ];
    Ok(TrainingExample {
        input_channels,
        noisy_linear_mel: noisy.into_inner(),
        noisy_stacked,
        clean_stacked,
        interference_stacked,
        target_mask,
        clean_asr_features: asr_feature_pipeline(&mels.clean, stats, feat)?,
        meta: cfg.clone(),
        cleaner_passthrough: mels.cleaner_passthrough,
        cross_term_db,
    })
}

/// Global normalization statistics over the clean, microphone and channel-A
/// spectrograms of `scenes` calibration scenes, drawn from a stream disjoint
/// from the training stream.
pub fn calibrate_stats(sim: &SimulatorConfig, feat: &FeatureConfig, scenes: usize) -> Result<NormStats, SimError> {
    sim.validate()?;
    let stream = SimulatorConfig {
        seed: derive_seed(sim.seed, CALIBRATION_STREAM),
        ..sim.clone()
    };
    let mels = (0..scenes as u64)
        .into_par_iter()
        .map(|i| scene_mels(&render_scene(&stream.scene(i))?, feat))
        .collect::<Result<Vec<_>, SimError>>()?;
    let corpus: Vec<MelSpectrogram> = mels
        .into_iter()
        .flat_map(|m| [m.clean, m.mic, m.channel_a])
        .collect();
    Ok(normalization_stats(&corpus)?)
}
