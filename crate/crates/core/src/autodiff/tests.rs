use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>;

/// Plain two-point central differences with h = 1e-5, independent of
/// `grad_check`.
fn finite_diff(params: &[Tensor], build: &Build) -> Vec<Vec<f64>> {
    let eval = |ps: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let l = build(&mut g, &vs).unwrap();
        g.value(l).item()
    };
    let h = 1e-5;
    let mut out = Vec::new();
    for pi in 0..params.len() {
        let mut grads = Vec::new();
        for ei in 0..params[pi].numel() {
            let mut ps = params.to_vec();
            let x0 = ps[pi].data()[ei];
            ps[pi].data_mut()[ei] = x0 + h;
            let up = eval(&ps);
            ps[pi].data_mut()[ei] = x0 - h;
            let down = eval(&ps);
            grads.push((up - down) / (2.0 * h));
        }
        out.push(grads);
    }
    out
}

fn analytic(params: &[Tensor], build: &Build) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let vs: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let l = build(&mut g, &vs).unwrap();
    let grads = g.backward(l).unwrap();
    vs.iter().map(|&v| grads.wrt(v).into_data()).collect()
}

fn max_rel_error(params: &[Tensor], build: &Build) -> f64 {
    let a = analytic(params, build);
    let n = finite_diff(params, build);
    a.iter()
        .flatten()
        .zip(n.iter().flatten())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces `x` to a scalar with fixed random weights so every output element
/// contributes a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, x: Var) -> Result<Var, AutodiffError> {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| 0.5 + ((i * 37) % 11) as f64 / 10.0).collect())?;
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

#[test]
fn quadratic_gradient() {
    let mut g = Graph::new();
    let w = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap(), &[2.0, 4.0]);
}

#[test]
fn stop_gradient_sum_has_zero_gradient() {
    let mut g = Graph::new();
    let w = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let s = g.stop_gradient(w);
    let loss = g.sum(s);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(w).data(), &[0.0, 0.0]);
}

#[test]
fn stop_gradient_treats_subtree_as_constant() {
    // loss = sum(sg(w^2) * w) -> d/dw = w^2
    let mut g = Graph::new();
    let w = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
    let f = g.mul(w, w).unwrap();
    let s = g.stop_gradient(f);
    let p = g.mul(s, w).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap(), &[1.0, 4.0, 9.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let w = g.param(Tensor::zeros(vec![2, 2]));
    assert!(matches!(
        g.backward(w),
        Err(AutodiffError::NonScalarLoss(s)) if s == vec![2, 2]
    ));
}

#[test]
fn random_five_node_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = vec![
        random(&mut rng, &[3, 4], -1.0, 1.0),
        random(&mut rng, &[4, 2], -1.0, 1.0),
        random(&mut rng, &[2], -1.0, 1.0),
    ];
    let build: &Build = &|g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add(h, v[2])?;
        let s = g.sigmoid(h);
        let t = g.tanh(s);
        let e = g.exp(t);
        weighted_sum(g, e)
    };
    assert!(max_rel_error(&params, build) < 1e-6);
}

#[test]
fn pow_closed_form() {
    let mut g = Graph::new();
    let b = g.param(Tensor::scalar(0.25));
    let e = g.param(Tensor::scalar(0.5));
    let y = g.pow(b, e).unwrap();
    assert!((g.value(y).item() - 0.5).abs() < 1e-15);
    let grads = g.backward(y).unwrap();
    let de = grads.get(e).unwrap()[0];
    assert!((de - 0.5 * 0.25f64.ln()).abs() < 1e-15);
    assert!((de + 0.6931).abs() < 1e-4);
    // d/db = e * b^(e-1) = 0.5 * 0.25^-0.5 = 1
    assert!((grads.get(b).unwrap()[0] - 1.0).abs() < 1e-15);
}

#[test]
fn pow_zero_exponent_is_one() {
    let mut g = Graph::new();
    let b = g.constant(Tensor::new(vec![4], vec![1e-9, 0.1, 0.7, 1.0]).unwrap());
    let e = g.constant(Tensor::scalar(0.0));
    let y = g.pow(b, e).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 1.0));
}

#[test]
fn pow_rejects_nonpositive_base() {
    let mut g = Graph::new();
    let b = g.constant(Tensor::new(vec![3], vec![0.5, 0.0, 0.2]).unwrap());
    let e = g.constant(Tensor::scalar(0.5));
    assert!(matches!(
        g.pow(b, e),
        Err(AutodiffError::Domain { op: "pow", index: 1, .. })
    ));
}

#[test]
fn pow_grid_matches_finite_differences() {
    let bases = [0.05, 0.2, 0.45, 0.7, 0.95, 1.0];
    let exps = [0.1, 0.5, 0.9, 1.0];
    let mut b = Vec::new();
    let mut e = Vec::new();
    for &x in &bases {
        for &y in &exps {
            b.push(x);
            e.push(y);
        }
    }
    let n = b.len();
    let params = vec![
        Tensor::new(vec![n], b).unwrap(),
        Tensor::new(vec![n], e).unwrap(),
    ];
    let build: &Build = &|g, v| {
        let y = g.pow(v[0], v[1])?;
        weighted_sum(g, y)
    };
    assert!(max_rel_error(&params, build) < 1e-6);
}

#[test]
fn pow_per_row_exponent_broadcasts() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = vec![
        random(&mut rng, &[5, 4], 0.05, 1.0),
        random(&mut rng, &[5, 1], 0.05, 0.95),
    ];
    let build: &Build = &|g, v| {
        let y = g.pow(v[0], v[1])?;
        weighted_sum(g, y)
    };
    assert!(max_rel_error(&params, build) < 1e-6);
}

#[test]
fn floor_max_examples() {
    for (x, want, grad) in [(0.005, 0.01, 0.0), (0.5, 0.5, 1.0), (0.01, 0.01, 0.0)] {
        let mut g = Graph::new();
        let v = g.param(Tensor::scalar(x));
        let y = g.floor_max(v, 0.01);
        assert_eq!(g.value(y).item(), want);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(v).unwrap()[0], grad);
    }
}

#[test]
fn floor_max_matches_finite_differences_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let beta = 0.3;
    let data: Vec<f64> = (0..40)
        .map(|_| rng.random_range(0.0..1.0))
        .filter(|x: &f64| (x - beta).abs() > 1e-3)
        .collect();
    let params = vec![Tensor::new(vec![data.len()], data).unwrap()];
    let build: &Build = &move |g, v| {
        let y = g.floor_max(v[0], beta);
        weighted_sum(g, y)
    };
    let a = analytic(&params, build);
    let n = finite_diff(&params, build);
    for (a, n) in a[0].iter().zip(&n[0]) {
        // zero gradients below the floor are exact on both sides
        assert!((a - n).abs() <= 1e-6 * a.abs().max(n.abs()).max(1e-12), "{a} vs {n}");
    }
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cases: Vec<(&str, Vec<Tensor>, Box<Build>)> = vec![
        (
            "matmul",
            vec![random(&mut rng, &[3, 5], -1.0, 1.0), random(&mut rng, &[5, 4], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y)
            }),
        ),
        (
            "add_row_broadcast",
            vec![random(&mut rng, &[4, 3], -1.0, 1.0), random(&mut rng, &[3], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.add(v[0], v[1])?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y)
            }),
        ),
        (
            "sub_col_broadcast",
            vec![random(&mut rng, &[4, 3], -1.0, 1.0), random(&mut rng, &[4, 1], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.sub(v[0], v[1])?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y)
            }),
        ),
        (
            "mul",
            vec![random(&mut rng, &[2, 3], -1.0, 1.0), random(&mut rng, &[2, 3], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted_sum(g, y)
            }),
        ),
        (
            "log",
            vec![random(&mut rng, &[6], 0.2, 3.0)],
            Box::new(|g, v| {
                let y = g.log(v[0])?;
                weighted_sum(g, y)
            }),
        ),
        (
            "exp_scale",
            vec![random(&mut rng, &[6], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.scale(v[0], -1.7);
                let y = g.exp(y);
                weighted_sum(g, y)
            }),
        ),
        (
            "sigmoid_tanh_swish",
            vec![random(&mut rng, &[7], -3.0, 3.0)],
            Box::new(|g, v| {
                let s = g.sigmoid(v[0]);
                let t = g.tanh(v[0]);
                let w = g.swish(v[0])?;
                let y = g.add(s, t)?;
                let y = g.mul(y, w)?;
                weighted_sum(g, y)
            }),
        ),
        (
            "mean",
            vec![random(&mut rng, &[3, 3], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[0])?;
                let m = g.mean(y);
                Ok(g.exp(m))
            }),
        ),
        (
            "l1_and_squared_l2",
            vec![random(&mut rng, &[4, 2], 0.1, 1.0), random(&mut rng, &[4, 2], -1.0, -0.1)],
            Box::new(|g, v| {
                let a = g.l1_norm(v[0]);
                let b = g.l1_norm(v[1]);
                let c = g.squared_l2(v[1]);
                let ab = g.mul(a, b)?;
                g.add(ab, c)
            }),
        ),
        (
            "concat_slice",
            vec![random(&mut rng, &[3, 2], -1.0, 1.0), random(&mut rng, &[3, 4], -1.0, 1.0)],
            Box::new(|g, v| {
                let c = g.concat_cols(&[v[0], v[1]])?;
                let s = g.slice_cols(c, 1, 4)?;
                let r = g.slice_rows(s, 1, 2)?;
                let r = g.mul(r, r)?;
                weighted_sum(g, r)
            }),
        ),
        (
            "transpose",
            vec![random(&mut rng, &[3, 2], -1.0, 1.0), random(&mut rng, &[3, 2], -1.0, 1.0)],
            Box::new(|g, v| {
                let t = g.transpose(v[0])?;
                let y = g.matmul(t, v[1])?;
                weighted_sum(g, y)
            }),
        ),
        (
            "layer_norm",
            vec![
                random(&mut rng, &[4, 5], -2.0, 2.0),
                random(&mut rng, &[5], 0.5, 1.5),
                random(&mut rng, &[5], -0.5, 0.5),
            ],
            Box::new(|g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let y = g.tanh(y);
                weighted_sum(g, y)
            }),
        ),
        (
            "causal_depthwise_conv",
            vec![random(&mut rng, &[6, 3], -1.0, 1.0), random(&mut rng, &[3, 3], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.causal_depthwise_conv(v[0], v[1])?;
                let y = g.tanh(y);
                weighted_sum(g, y)
            }),
        ),
        (
            "masked_softmax",
            vec![random(&mut rng, &[4, 4], -2.0, 2.0)],
            Box::new(|g, v| {
                let mask = causal_mask(4, 2);
                let y = g.masked_softmax(v[0], &mask)?;
                weighted_sum(g, y)
            }),
        ),
    ];
    for (name, params, build) in &cases {
        let err = max_rel_error(params, build.as_ref());
        assert!(err < 1e-6, "{name}: rel error {err}");
    }
}

fn causal_mask(n: usize, left: usize) -> Tensor {
    let mut m = Tensor::zeros(vec![n, n]);
    for t in 0..n {
        for s in 0..n {
            if s > t || s + left < t {
                m.data_mut()[t * n + s] = f64::NEG_INFINITY;
            }
        }
    }
    m
}

#[test]
fn masked_softmax_zeroes_masked_positions() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(vec![3, 3], 1.0));
    let y = g.masked_softmax(x, &causal_mask(3, 1)).unwrap();
    let v = g.value(y);
    assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
    assert_eq!(v.row(2), &[0.0, 0.5, 0.5]);
}

#[test]
fn stopped_subtree_equals_constant_substitution() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w0 = random(&mut rng, &[3, 3], -1.0, 1.0);
    let x0 = random(&mut rng, &[4, 3], -1.0, 1.0);

    let run = |substitute: bool| {
        let mut g = Graph::new();
        let w = g.param(w0.clone());
        let x = g.constant(x0.clone());
        let h = g.matmul(x, w).unwrap();
        let side = if substitute {
            let v = g.value(h).clone();
            g.constant(v)
        } else {
            g.stop_gradient(h)
        };
        let s = g.sigmoid(side);
        let y = g.mul(h, s).unwrap();
        let loss = g.squared_l2(y);
        g.backward(loss).unwrap().wrt(w)
    };
    assert_eq!(run(false), run(true));
}

#[test]
fn repeated_backward_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let w = g.param(random(&mut rng, &[4, 4], -1.0, 1.0));
    let x = g.constant(random(&mut rng, &[6, 4], -1.0, 1.0));
    let h = g.matmul(x, w).unwrap();
    let gain = g.constant(Tensor::full(vec![4], 1.0));
    let bias = g.constant(Tensor::zeros(vec![4]));
    let h = g.layer_norm(h, gain, bias, 1e-5).unwrap();
    let loss = g.squared_l2(h);
    let a = g.backward(loss).unwrap().wrt(w);
    let b = g.backward(loss).unwrap().wrt(w);
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn grad_check_sigmoid_fc_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let input = random(&mut rng, &[5, 6], -1.0, 1.0);
    let params = vec![random(&mut rng, &[6, 3], -0.5, 0.5), random(&mut rng, &[3], -0.5, 0.5)];
    let report = grad_check(
        &params,
        |g, v| {
            let x = g.constant(input.clone());
            let h = g.matmul(x, v[0])?;
            let h = g.add(h, v[1])?;
            let s = g.sigmoid(h);
            Ok(g.squared_l2(s))
        },
        1e-4,
    )
    .unwrap();
    assert_eq!(report.checked, 21);
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn grad_check_holds_stopped_values() {
    // loss = sum(stop(w^2) * w): backward sees the stopped factor as a
    // constant c = w0^2, so d/dw = c, not the full derivative 3 w^2
    let params = vec![Tensor::new(vec![3], vec![0.5, -1.2, 2.0]).unwrap()];
    let f = |g: &mut Graph, v: &[Var]| {
        let sq = g.mul(v[0], v[0])?;
        let c = g.stop_gradient(sq);
        let p = g.mul(c, v[0])?;
        Ok(g.sum(p))
    };
    let report = grad_check(&params, f, 1e-4).unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");

    let mut g = Graph::with_held_stops(vec![Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap()]);
    let w = g.param(params[0].clone());
    let loss = f(&mut g, &[w]).unwrap();
    assert_eq!(g.value(loss).item(), 0.5 - 1.2 + 2.0);
    assert_eq!(g.stop_values()[0].data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn grad_check_flags_planted_fault() {
    let params = vec![Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap()];
    // true gradient of sum(x^2) is 2x; supply 2x except one wrong element
    let wrong = Tensor::new(vec![3], vec![0.6, -1.4, 2.5]).unwrap();
    let report = grad_check_values(
        &params,
        &[wrong],
        |ps| ps[0].data().iter().map(|v| v * v).sum(),
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_error > 1e-2);
    assert_eq!(report.worst_param_index, vec![0, 2]);
}

#[test]
fn grad_check_reports_non_finite() {
    let params = vec![Tensor::new(vec![2], vec![0.5, 0.5]).unwrap()];
    let report = grad_check_values(
        &params,
        &[Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap()],
        |ps| ps[0].data().iter().sum(),
        1e-4,
    )
    .unwrap();
    assert!(report.non_finite);
    assert_eq!(report.worst_param_index, vec![0, 1]);
    assert!(!report.passes(1e-4));
}

#[test]
fn depends_on_respects_stop_gradient() {
    let mut g = Graph::new();
    let w = g.param(Tensor::scalar(2.0));
    let s = g.stop_gradient(w);
    let y = g.mul(s, s).unwrap();
    assert!(!g.depends_on(y, w));
    let z = g.mul(w, s).unwrap();
    assert!(g.depends_on(z, w));
}

proptest! {
    #[test]
    fn stop_gradient_is_forward_exact(data in prop::collection::vec(-1e6f64..1e6, 1..32)) {
        let mut g = Graph::new();
        let n = data.len();
        let x = g.param(Tensor::new(vec![n], data.clone()).unwrap());
        let y = g.stop_gradient(x);
        let out: Vec<u64> = g.value(y).data().iter().map(|v| v.to_bits()).collect();
        let inp: Vec<u64> = data.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(out, inp);
    }

    #[test]
    fn floor_max_output_never_below_beta(
        data in prop::collection::vec(-2.0f64..2.0, 1..32),
        beta in 0.0f64..1.0,
    ) {
        let mut g = Graph::new();
        let n = data.len();
        let x = g.param(Tensor::new(vec![n], data.clone()).unwrap());
        let y = g.floor_max(x, beta);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        for (i, &v) in g.value(y).data().iter().enumerate() {
            prop_assert!(v >= beta);
            let want = if data[i] > beta { 1.0 } else { 0.0 };
            prop_assert_eq!(grads.get(x).unwrap()[i], want);
        }
    }
}
