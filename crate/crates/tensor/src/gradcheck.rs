//! Central finite-difference gradient checking.

use crate::{Param, Var};

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub rel_error: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error.is_finite() && self.rel_error <= tol
    }
}

/// Compares reverse-mode gradients of the scalar `f` w.r.t. `params` against
/// central differences with step `h`.
///
/// `f` must rebuild its graph from the current parameter values on every call.
pub fn check_params(params: &[Param<f64>], f: impl Fn() -> Var<f64>, h: f64) -> GradCheck {
    let loss = f();
    assert_eq!(loss.len(), 1, "gradient check needs a scalar loss");
    let grads = loss.backward();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for p in params {
        let n = p.numel();
        match grads.param(p) {
            Some(g) => analytic.extend(g.iter().copied()),
            None => analytic.extend(std::iter::repeat_n(0.0, n)),
        }
        for i in 0..n {
            let orig = p.value().as_slice_memory_order().unwrap()[i];
            let set = |v: f64| p.update(|a| a.as_slice_memory_order_mut().unwrap()[i] = v);
            set(orig + h);
            let up = f().item();
            set(orig - h);
            let down = f().item();
            set(orig);
            numeric.push((up - down) / (2.0 * h));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let denom = norm(&analytic).max(norm(&numeric)).max(1e-12);
    GradCheck {
        rel_error: norm(&diff) / denom,
        analytic,
        numeric,
    }
}
