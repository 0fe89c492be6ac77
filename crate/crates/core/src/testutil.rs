//! Small seeded fixtures shared by unit tests.

use crate::features::{FeatureConfig, NormStats};
use crate::model::{init_params, Frontend, FrontendParams, ModelConfig};
use crate::sim::{calibrate_stats, make_example, Mode, NoiseKind, SimulatorConfig, TrainingExample};

pub fn short_sim(mode: Mode) -> SimulatorConfig {
    SimulatorConfig {
        mode,
        duration: 0.3,
        noise_context: 0.1,
        ..SimulatorConfig::desk()
    }
}

pub fn stats(mode: Mode) -> NormStats {
    calibrate_stats(&short_sim(mode), &FeatureConfig::desk(), 3).unwrap()
}

pub fn frontend(mode: Mode) -> Frontend {
    let model = ModelConfig {
        mode,
        ..ModelConfig::desk()
    };
    Frontend::new(model, FeatureConfig::desk(), stats(mode)).unwrap()
}

pub fn example(fe: &Frontend, seed: u64, snr_db: f64) -> TrainingExample {
    let sim = short_sim(fe.model.mode);
    let cfg = sim.scene_with(seed, snr_db, NoiseKind::Pink, 0.2);
    make_example(&cfg, &fe.features, &fe.stats).unwrap()
}

pub fn params(fe: &Frontend, seed: u64) -> FrontendParams {
    init_params(&fe.model, seed).unwrap()
}
