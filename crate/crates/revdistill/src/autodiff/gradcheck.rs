//! Central finite-difference verification of reverse-mode gradients.
//!
//! Runs in f64: with step h the truncation error is O(h^2), so h = 1e-5
//! resolves relative errors well below the 1e-4 acceptance bar.

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares analytic gradients of `f(params)` against central differences,
/// element by element. `f` must be a pure function of the parameter values
/// (it is re-evaluated under perturbation). Relative error uses
/// `|g - fd| / max(|g|, |fd|, 1e-6)` so near-zero gradients are judged on
/// an absolute scale.
pub fn gradcheck<F>(params: &[Tensor<f64>], f: F, h: f64) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    for p in params {
        p.zero_grad();
    }
    let loss = f(params);
    loss.backward();
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let mut max_rel_err = 0.0f64;
    let mut checked = 0;
    for (pi, p) in params.iter().enumerate() {
        for e in 0..p.len() {
            let orig = p.values()[e];
            p.update_values(|v| v[e] = orig + h);
            let fp = f(params).value();
            p.update_values(|v| v[e] = orig - h);
            let fm = f(params).value();
            p.update_values(|v| v[e] = orig);
            let fd = (fp - fm) / (2.0 * h);
            let g = grads[pi][e];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }
    GradCheckReport {
        max_rel_err,
        checked,
    }
}
