use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AutodiffError, Graph, Tensor, Var};

const REL_FLOOR: f64 = 1e-8;

/// Worst disagreement between analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    /// `max |a - n| / max(|a|, |n|, floor)` over all checked elements, with
    /// `floor = 1e-8 * max(1, |f|)`. Infinite when a gradient was non-finite.
    pub max_rel_error: f64,
    /// `[parameter, element]` of the worst element.
    pub worst_param_index: Vec<usize>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub non_finite: bool,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        !self.non_finite && self.max_rel_error < tol
    }
}

/// Checks autodiff gradients of `f` against central differences.
///
/// `f` receives a fresh graph with every tensor of `params` bound as a
/// trainable leaf (in order) and returns the scalar loss. Outputs of
/// `stop_gradient` are held at their values at `params` while perturbing,
/// which is the function the backward pass differentiates.
pub fn grad_check<F>(params: &[Tensor], f: F, eps: f64) -> Result<GradReport, AutodiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError> + Sync,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| graph.param(p.clone())).collect();
    let loss = f(&mut graph, &vars)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let held = graph.stop_values();
    let value = |ps: &[Tensor]| -> f64 {
        let mut g = Graph::with_held_stops(held.clone());
        let vs: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        match f(&mut g, &vs) {
            Ok(l) => g.value(l).item(),
            Err(_) => f64::NAN,
        }
    };
    grad_check_values(params, &analytic, value, eps)
}

/// Compares supplied `analytic` gradients with fourth-order central
/// differences of `value`, using a per-element step `eps * max(1, |x|)`.
///
/// Gradients far below the loss scale are compared in absolute terms: the
/// error denominator never drops below `1e-8 * max(1, |value(params)|)`, the
/// level of finite-difference rounding noise.
pub fn grad_check_values<V>(
    params: &[Tensor],
    analytic: &[Tensor],
    value: V,
    eps: f64,
) -> Result<GradReport, AutodiffError>
where
    V: Fn(&[Tensor]) -> f64 + Sync,
{
    if !(eps > 0.0) {
        return Err(AutodiffError::Invalid {
            op: "grad_check",
            msg: format!("eps must be positive, got {eps}"),
        });
    }
    if analytic.len() != params.len() {
        return Err(AutodiffError::Invalid {
            op: "grad_check",
            msg: "one analytic gradient per parameter required".into(),
        });
    }
    for (p, a) in params.iter().zip(analytic) {
        if p.shape() != a.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "grad_check",
                lhs: p.shape().to_vec(),
                rhs: a.shape().to_vec(),
            });
        }
    }
    let positions: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.numel()).map(move |ei| (pi, ei)))
        .collect();

    let numeric: Vec<f64> = positions
        .par_iter()
        .map_init(
            || params.to_vec(),
            |local, &(pi, ei)| {
                let x0 = local[pi].data()[ei];
                let h = eps * x0.abs().max(1.0);
                let mut at = |x: f64| {
                    local[pi].data_mut()[ei] = x;
                    value(local)
                };
                let d = (-at(x0 + 2.0 * h) + 8.0 * at(x0 + h) - 8.0 * at(x0 - h) + at(x0 - 2.0 * h))
                    / (12.0 * h);
                local[pi].data_mut()[ei] = x0;
                d
            },
        )
        .collect();

    let floor = REL_FLOOR * value(params).abs().max(1.0);
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_param_index: Vec::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: positions.len(),
        non_finite: false,
    };
    for (&(pi, ei), &n) in positions.iter().zip(&numeric) {
        let a = analytic[pi].data()[ei];
        let rel = if a.is_finite() && n.is_finite() {
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        } else {
            f64::INFINITY
        };
        if rel > report.max_rel_error || (report.worst_param_index.is_empty() && rel.is_nan()) {
            report.max_rel_error = rel;
            report.worst_param_index = vec![pi, ei];
            report.analytic = a;
            report.numeric = n;
        }
        if !rel.is_finite() {
            report.non_finite = true;
            report.max_rel_error = f64::INFINITY;
            report.worst_param_index = vec![pi, ei];
            report.analytic = a;
            report.numeric = n;
            break;
        }
    }
    Ok(report)
}
