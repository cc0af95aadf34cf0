//! Central-difference gradient verification.
//!
//! Two layers of tooling: [`central_diff_flat`] checks a single entry of a
//! single array against a pure loss closure, and [`check_params`] sweeps
//! randomly chosen entries of every parameter tensor reachable through a
//! model's [`Params`] visitor. Run models in f64: central differences with
//! step ~1e-6 carry roughly 1e-10 truncation error there, so disagreement
//! beyond the tolerance means a wrong derivative, not float noise.

use std::collections::HashMap;

use ndarray::{Array, Dimension};
use rand::Rng;

use crate::nn::scalar::Scalar;
use crate::nn::Params;
use crate::rng::{stream_rng, StreamId};

/// Central difference of `eval` w.r.t. the `flat`-th entry (row-major) of
/// `arr`. `eval` must be pure in the array argument.
pub fn central_diff_flat<S, D, F>(arr: &Array<S, D>, flat: usize, h: f64, mut eval: F) -> f64
where
    S: Scalar,
    D: Dimension,
    F: FnMut(&Array<S, D>) -> f64,
{
    let step = S::from_f64(h);
    let mut plus = arr.clone();
    plus.as_slice_mut().expect("standard layout")[flat] += step;
    let mut minus = arr.clone();
    minus.as_slice_mut().expect("standard layout")[flat] -= step;
    (eval(&plus) - eval(&minus)) / (2.0 * h)
}

/// One checked entry that exceeded the tolerance.
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub name: String,
    pub flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a [`check_params`] sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Entry with the largest relative error (also present in `failures`
    /// when above tolerance).
    pub worst: Option<GradMismatch>,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Sweep up to `per_tensor` randomly chosen entries of every parameter
/// tensor, comparing the gradient buffers against central differences of
/// `loss`.
///
/// Contract: the caller has already run its forward/backward pass so the
/// gradient buffers hold dL/dθ, and `loss` is a *pure* re-evaluation of the
/// same scalar (no gradient accumulation, no RNG draws — noise must be
/// frozen into the closure).
pub fn check_params<M, F>(
    model: &mut M,
    mut loss: F,
    h: f64,
    per_tensor: usize,
    tolerance: f64,
    seed: u64,
) -> GradCheckReport
where
    M: Params<f64>,
    F: FnMut(&mut M) -> f64,
{
    // Snapshot analytic gradients and tensor sizes.
    let mut analytic: HashMap<String, Vec<f64>> = HashMap::new();
    let mut order: Vec<(String, usize)> = Vec::new();
    model.visit_params(&mut |name, _, grad| {
        analytic.insert(name.to_string(), grad.iter().copied().collect());
        order.push((name.to_string(), grad.len()));
    });

    let mut rng = stream_rng(seed, StreamId::Init);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        failures: Vec::new(),
    };

    for (name, len) in order {
        let mut picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        picks.sort_unstable();
        picks.dedup();
        for flat in picks {
            let numeric = {
                let mut eval_at = |offset: f64| -> f64 {
                    set_entry(model, &name, flat, offset);
                    let v = loss(model);
                    set_entry(model, &name, flat, -offset);
                    v
                };
                (eval_at(h) - eval_at(-h)) / (2.0 * h)
            };
            let a = analytic[&name][flat];
            let err = rel_err(a, numeric);
            report.checked += 1;
            let mismatch = GradMismatch {
                name: name.clone(),
                flat_index: flat,
                analytic: a,
                numeric,
                rel_err: err,
            };
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(mismatch.clone());
            }
            if err > tolerance {
                report.failures.push(mismatch);
            }
        }
    }
    report
}

fn set_entry<M: Params<f64>>(model: &mut M, target: &str, flat: usize, delta: f64) {
    model.visit_params(&mut |name, mut param, _| {
        if name == target {
            let slice = param.as_slice_mut().expect("standard layout");
            slice[flat] += delta;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array1, ArrayViewMutD};

    #[test]
    fn central_diff_of_square_is_linear() {
        let x = arr1(&[3.0f64, -1.0]);
        let g = central_diff_flat(&x, 0, 1e-6, |v| v.iter().map(|a| a * a).sum());
        assert!((g - 6.0).abs() < 1e-6, "got {g}");
    }

    struct Quadratic {
        theta: Array1<f64>,
        grad: Array1<f64>,
    }

    impl Params<f64> for Quadratic {
        fn visit_params(&mut self, f: &mut crate::nn::ParamVisitor<'_, f64>) {
            f(
                "theta",
                self.theta.view_mut().into_dyn(),
                self.grad.view_mut().into_dyn(),
            );
        }
    }

    fn quad_loss(theta: &Array1<f64>) -> f64 {
        // L = sum_i (i+1) * theta_i^2; dL/dtheta_i = 2 (i+1) theta_i.
        theta
            .iter()
            .enumerate()
            .map(|(i, &t)| (i + 1) as f64 * t * t)
            .sum()
    }

    #[test]
    fn check_params_accepts_correct_gradients() {
        let theta = arr1(&[0.5f64, -1.5, 2.0]);
        let grad = Array1::from_shape_fn(3, |i| 2.0 * (i + 1) as f64 * theta[i]);
        let mut model = Quadratic { theta, grad };
        let report = check_params(&mut model, |m| quad_loss(&m.theta), 1e-6, 10, 1e-6, 0);
        assert_eq!(report.checked, 3);
        assert!(report.passed(), "max err {}", report.max_rel_err);
        // Model restored after perturbations.
        assert_eq!(model.theta, arr1(&[0.5, -1.5, 2.0]));
    }

    #[test]
    fn check_params_flags_wrong_gradients() {
        let theta = arr1(&[0.5f64, -1.5, 2.0]);
        let mut grad = Array1::from_shape_fn(3, |i| 2.0 * (i + 1) as f64 * theta[i]);
        grad[1] *= -1.0; // sabotage one entry
        let mut model = Quadratic { theta, grad };
        let report = check_params(&mut model, |m| quad_loss(&m.theta), 1e-6, 10, 1e-6, 0);
        assert!(!report.passed());
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].name, "theta");
        assert_eq!(report.failures[0].flat_index, 1);
    }

    #[allow(dead_code)]
    fn visitor_type_is_object_safe(f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>)) {
        let _ = f;
    }
}
