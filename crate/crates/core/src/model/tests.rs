use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::autodiff::{grad_check, sigmoid, Graph, Tensor};
use crate::features::{asr_feature_pipeline, log_compress};
use crate::frames::FrameMatrix;
use crate::mask::{apply_mask, postprocess, Alpha, PostProcess};
use crate::sim::Mode;
use crate::testutil;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        layers: 1,
        units: 8,
        heads: 2,
        ffn_dim: 12,
        conv_kernel: 3,
        left_context: 2,
        mask_dim: 6,
        asr_units: 5,
        ..ModelConfig::desk()
    }
}

fn run_encoder(cfg: &ModelConfig, params: &ParamSet, input: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let p = params.bind_constant(&mut g);
    let x = g.constant(input.clone());
    let e = encoder_forward(&mut g, &p, x, cfg).unwrap();
    g.value(e).clone()
}

#[test]
fn alpha_init_std_over_ten_thousand_draws() {
    let cfg = tiny_config();
    let mut draws = Vec::new();
    let mut seed = 0;
    while draws.len() < 10_000 {
        let p = init_params(&cfg, seed).unwrap();
        draws.extend_from_slice(p.trainable.get("alpha.w").unwrap().data());
        assert_eq!(p.trainable.get("alpha.b").unwrap().data(), &[0.0]);
        seed += 1;
    }
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let std = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((0.009..=0.011).contains(&std), "std {std}");
}

#[test]
fn init_is_seeded() {
    let cfg = ModelConfig::desk();
    let a = init_params(&cfg, 5).unwrap();
    assert_eq!(a, init_params(&cfg, 5).unwrap());
    assert_ne!(a.trainable, init_params(&cfg, 6).unwrap().trainable);
    // the proxy does not depend on the model seed
    assert_eq!(a.frozen_asr, init_params(&cfg, 6).unwrap().frozen_asr);
    let bound = 1.0 / (256f64).sqrt();
    assert!(a.trainable.get("input.w").unwrap().data().iter().all(|v| v.abs() <= bound));
}

#[test]
fn initial_alpha_is_near_one_half() {
    let cfg = ModelConfig::desk();
    let mut inside = 0;
    let mut total = 0;
    for seed in 0..20 {
        let p = init_params(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        // unit-variance rows, as produced by the final layer norm
        let e = random_tensor(&mut rng, vec![100, cfg.units], 1.0);
        let mut g = Graph::new();
        let b = p.trainable.bind_constant(&mut g);
        let ev = g.constant(e);
        let a = mask_scalar_net(&mut g, &b, ev, true).unwrap();
        for &v in g.value(a).data() {
            total += 1;
            if (0.4..=0.6).contains(&v) {
                inside += 1;
            }
        }
    }
    assert!(inside as f64 >= 0.99 * total as f64);
}

#[test]
fn config_validation() {
    assert!(ModelConfig { conv_kernel: 4, ..ModelConfig::desk() }.validate().is_err());
    assert!(ModelConfig { heads: 5, ..ModelConfig::desk() }.validate().is_err());
    ModelConfig::paper().validate().unwrap();
    assert_eq!(ModelConfig::paper().mask_dim, 512);
}

#[test]
fn encoder_is_causal() {
    let cfg = tiny_config();
    let params = init_params(&cfg, 3).unwrap().trainable;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let frames = 9;
    let input = random_tensor(&mut rng, vec![frames, 12], 1.0);
    let base = run_encoder(&cfg, &params, &input);
    for t in 0..frames - 1 {
        let mut perturbed = input.clone();
        for c in 0..12 {
            perturbed.data_mut()[(t + 1) * 12 + c] += rng.random_range(-3.0..3.0);
        }
        let out = run_encoder(&cfg, &params, &perturbed);
        for s in 0..=t {
            assert_eq!(out.row(s), base.row(s), "frame {s} moved when {} changed", t + 1);
        }
        assert_ne!(out.row(t + 1), base.row(t + 1));
    }
}

#[test]
fn attention_mask_window() {
    let m = causal_attention_mask(5, 1);
    assert_eq!(m.row(0), &[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY]);
    assert_eq!(m.row(3)[2..4], [0.0, 0.0]);
    assert_eq!(m.row(3)[1], f64::NEG_INFINITY);
    assert_eq!(m.row(3)[4], f64::NEG_INFINITY);
}

#[test]
fn zero_weights_give_constant_output() {
    let cfg = tiny_config();
    let mut params = init_params(&cfg, 1).unwrap().trainable;
    for e in params.iter_mut() {
        e.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let input = Tensor::zeros(vec![6, 12]);
    let a = run_encoder(&cfg, &params, &input);
    let b = run_encoder(&cfg, &params, &input);
    assert_eq!(a, b);
    assert!(a.data().iter().all(|&v| v == a.data()[0]));
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let params = init_params(&cfg, 2).unwrap().trainable;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let input = random_tensor(&mut rng, vec![5, 12], 1.0);
    let probe = random_tensor(&mut rng, vec![5, cfg.units], 1.0);
    let report = grad_check(
        &params.tensors(),
        |g, vars| {
            let p = params.bound_from(vars);
            let x = g.constant(input.clone());
            let e = encoder_forward(g, &p, x, &cfg).map_err(|e| match e {
                ModelError::Autodiff(a) => a,
                other => panic!("{other}"),
            })?;
            let r = g.constant(probe.clone());
            let y = g.mul(e, r)?;
            Ok(g.sum(y))
        },
        1e-3,
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn mask_decoder_examples() {
    let cfg = tiny_config();
    let mut params = init_params(&cfg, 1).unwrap().trainable;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let e = random_tensor(&mut rng, vec![4, cfg.units], 1.0);
    let decode = |params: &ParamSet| {
        let mut g = Graph::new();
        let p = params.bind_constant(&mut g);
        let ev = g.constant(e.clone());
        let m = mask_decoder(&mut g, &p, ev).unwrap();
        g.value(m).clone()
    };

    // random weights against a direct matmul + sigmoid
    let out = decode(&params);
    let (w, b) = (params.get("irm.w").unwrap().clone(), params.get("irm.b").unwrap().clone());
    for t in 0..4 {
        for d in 0..cfg.mask_dim {
            let z: f64 = (0..cfg.units).map(|u| e.get(t, u) * w.get(u, d)).sum::<f64>() + b.data()[d];
            assert!((out.get(t, d) - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
        }
    }

    params.get_mut("irm.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    assert!(decode(&params).data().iter().all(|&v| v == 0.5));
    params.get_mut("irm.b").unwrap().data_mut().iter_mut().for_each(|v| *v = 40.0);
    assert!(decode(&params).data().iter().all(|&v| v > 1.0 - 1e-15));
}

#[test]
fn scalar_net_zero_weights_and_stop_gradient() {
    let cfg = tiny_config();
    let mut params = init_params(&cfg, 1).unwrap().trainable;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = random_tensor(&mut rng, vec![6, 12], 1.0);

    let alpha_grads = |params: &ParamSet, sg: bool| {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let x = g.constant(input.clone());
        let e = encoder_forward(&mut g, &p, x, &cfg).unwrap();
        let a = mask_scalar_net(&mut g, &p, e, sg).unwrap();
        let values = g.value(a).clone();
        let loss = g.sum(a);
        let grads = g.backward(loss).unwrap();
        let encoder_touched = params
            .names()
            .zip(p.vars())
            .filter(|(n, _)| ParamGroup::of(n) == ParamGroup::Encoder)
            .any(|(_, v)| grads.get(*v).is_some_and(|gr| gr.iter().any(|x| *x != 0.0)));
        (values, encoder_touched)
    };
    let (_, touched) = alpha_grads(&params, true);
    assert!(!touched);
    let (_, touched) = alpha_grads(&params, false);
    assert!(touched);

    params.get_mut("alpha.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let (values, _) = alpha_grads(&params, true);
    assert_eq!(values.shape(), &[6, 1]);
    assert!(values.data().iter().all(|&v| v == 0.5));
}

#[test]
fn frozen_proxy_matches_loop_oracle_and_is_lipschitz() {
    let cfg = tiny_config();
    let asr = frozen_asr_params(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let f = FrameMatrix::from_tensor(&random_tensor(&mut rng, vec![7, cfg.mask_dim], 1.0)).unwrap();
    let out = frozen_asr_encoder(&asr, &f).unwrap();

    let (w1, b1) = (asr.get("asr.in.w").unwrap(), asr.get("asr.in.b").unwrap());
    let k = asr.get("asr.conv.k").unwrap();
    let (w2, b2) = (asr.get("asr.out.w").unwrap(), asr.get("asr.out.b").unwrap());
    let h = cfg.asr_units;
    let h1: Vec<Vec<f64>> = (0..7)
        .map(|t| {
            (0..h)
                .map(|j| ((0..cfg.mask_dim).map(|i| f.get(t, i) * w1.get(i, j)).sum::<f64>() + b1.data()[j]).tanh())
                .collect()
        })
        .collect();
    let taps = k.rows();
    for t in 0..7 {
        let conv: Vec<f64> = (0..h)
            .map(|j| {
                (0..taps)
                    .filter(|&q| t + q + 1 >= taps)
                    .map(|q| k.get(q, j) * h1[t + q + 1 - taps][j])
                    .sum()
            })
            .collect();
        for j in 0..h {
            let z: f64 = (0..h).map(|i| conv[i] * w2.get(i, j)).sum::<f64>() + b2.data()[j];
            assert!((out.get(t, j) - z.tanh()).abs() < 1e-12);
        }
    }

    assert_eq!(out, frozen_asr_encoder(&asr, &f).unwrap());

    // tanh is 1-Lipschitz, so the Frobenius norms bound the constant
    let fro = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let bound = fro(w1) * fro(k) * fro(w2);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let delta: Vec<f64> = (0..f.data().len()).map(|_| rng.random_range(-1e-3..1e-3)).collect();
        let g = f.zip_map(&FrameMatrix::new(7, cfg.mask_dim, delta.clone()).unwrap(), "probe", |a, b| a + b).unwrap();
        let diff = frozen_asr_encoder(&asr, &g).unwrap();
        let num = diff.data().iter().zip(out.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(num / den);
    }
    assert!(worst.is_finite() && worst > 0.0 && worst <= bound, "K {worst} vs bound {bound}");
}

#[test]
fn passthrough_alpha_recovers_noisy_features() {
    let fe = testutil::frontend(Mode::Enhancement);
    let params = testutil::params(&fe, 1);
    for seed in 0..5 {
        let ex = testutil::example(&fe, seed, 0.0);
        let out = fe.forward(&params, &ex, AlphaMode::Fixed(1e-6), 0.01).unwrap();
        let base = asr_feature_pipeline(&ex.noisy_mel(), &fe.stats, &fe.features).unwrap();
        for (a, b) in out.asr_features.values().data().iter().zip(base.values().data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn fixed_half_matches_composed_pipeline() {
    for mode in [Mode::Enhancement, Mode::Aec] {
        let fe = testutil::frontend(mode);
        let params = testutil::params(&fe, 2);
        let ex = testutil::example(&fe, 3, 5.0);
        let out = fe.forward(&params, &ex, AlphaMode::Fixed(0.5), 0.01).unwrap();

        let m_bar = postprocess(&out.m_hat, &PostProcess::fixed(0.5, 0.01)).unwrap();
        let enhanced = apply_mask(&ex.noisy_stacked, &m_bar).unwrap();
        let feats = fe.stats.normalize(&log_compress(&enhanced)).unwrap();
        for (a, b) in out.m_bar.values().data().iter().zip(m_bar.values().data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in out.asr_features.values().data().iter().zip(feats.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.alpha, Alpha::Fixed(0.5));
    }
}

#[test]
fn zero_scalar_net_equals_fixed_half() {
    let fe = testutil::frontend(Mode::Enhancement);
    let mut params = testutil::params(&fe, 4);
    params.trainable.get_mut("alpha.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let ex = testutil::example(&fe, 1, 0.0);
    let fixed = fe.forward(&params, &ex, AlphaMode::Fixed(0.5), 0.01).unwrap();
    let predicted = fe.forward(&params, &ex, AlphaMode::Predicted, 0.01).unwrap();
    assert_eq!(fixed.asr_features, predicted.asr_features);
    assert_eq!(fixed.m_bar, predicted.m_bar);
    assert_eq!(predicted.alpha, Alpha::PerFrame(vec![0.5; ex.frames()]));
}

#[test]
fn predicted_alpha_at_init_is_near_one_half_on_real_examples() {
    let fe = testutil::frontend(Mode::Enhancement);
    let mut inside = 0;
    let mut total = 0;
    for seed in 0..10 {
        let params = testutil::params(&fe, seed);
        let ex = testutil::example(&fe, seed, 0.0);
        let out = fe.forward(&params, &ex, AlphaMode::Predicted, 0.01).unwrap();
        let Alpha::PerFrame(track) = out.alpha else { unreachable!() };
        total += track.len();
        inside += track.iter().filter(|a| (0.4..=0.6).contains(*a)).count();
        assert!(track.iter().all(|&a| a > 0.0 && a < 1.0));
    }
    assert!(inside as f64 >= 0.99 * total as f64);
}

#[test]
fn alpha_gradient_through_asr_path() {
    for mode in [Mode::Enhancement, Mode::Aec] {
        let fe = testutil::frontend(mode);
        let params = testutil::params(&fe, 5);
        let ex = testutil::example(&fe, 2, 0.0);
        let clean = frozen_asr_encoder(&params.frozen_asr, ex.clean_asr_features.values()).unwrap();
        let names = ["alpha.w", "alpha.b"];
        let theta: Vec<Tensor> = names.iter().map(|n| params.trainable.get(n).unwrap().clone()).collect();
        let report = grad_check(
            &theta,
            |g, vars| {
                let mut trainable = params.trainable.clone();
                let mut bound_vars = Vec::new();
                for e in trainable.iter_mut() {
                    match names.iter().position(|n| *n == e.name) {
                        Some(i) => bound_vars.push(vars[i]),
                        None => bound_vars.push(g.constant(e.tensor.clone())),
                    }
                }
                let p = params.trainable.bound_from(&bound_vars);
                let asr = params.frozen_asr.bind_constant(g);
                let (_, emb) = fe
                    .build(g, &p, &asr, &ex, AlphaMode::Predicted, 0.01)
                    .map_err(|e| match e {
                        ModelError::Autodiff(a) => a,
                        other => panic!("{other}"),
                    })?;
                let c = g.constant(clean.to_tensor());
                let d = g.sub(emb, c)?;
                Ok(g.squared_l2(d))
            },
            1e-3,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{mode:?}: {report:?}");
    }
}

#[test]
fn mode_mismatch_is_rejected() {
    let enh = testutil::frontend(Mode::Enhancement);
    let aec_fe = testutil::frontend(Mode::Aec);
    let ex = testutil::example(&aec_fe, 1, 0.0);
    let params = testutil::params(&enh, 1);
    assert!(matches!(
        enh.forward(&params, &ex, AlphaMode::Fixed(0.5), 0.01),
        Err(ModelError::Mismatch(_))
    ));
}

#[test]
fn sigmoid_of_zero_is_one_half() {
    assert_eq!(sigmoid(0.0), 0.5);
}
