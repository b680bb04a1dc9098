//! Finite-difference gradient oracle.
//!
//! Every hand-derived backward pass in the crate is held to these routines in tests.

use serde::Serialize;

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param_index: usize,
    pub passed: bool,
}

fn probe(loss_fn: &mut impl FnMut(&Matrix) -> f64, theta: &Matrix, i: usize, step: f64) -> Result<f64> {
    let mut shifted = theta.clone();
    shifted.data_mut()[i] += step;
    let v = loss_fn(&shifted);
    if !v.is_finite() {
        return Err(Error::numeric(format!(
            "loss is {v} at probe point (coordinate {i}, step {step:e})"
        )));
    }
    Ok(v)
}

/// Central differences `(f(θ+εeᵢ) − f(θ−εeᵢ)) / 2ε` for every coordinate of `theta`.
pub fn finite_diff_grad(mut loss_fn: impl FnMut(&Matrix) -> f64, theta: &Matrix, eps: f64) -> Result<Matrix> {
    if !(eps > 0.0) {
        return Err(Error::usage(format!(
            "finite difference step must be positive, got {eps}"
        )));
    }
    let mut grad = Matrix::zeros(theta.rows(), theta.cols());
    for i in 0..theta.len() {
        let plus = probe(&mut loss_fn, theta, i, eps)?;
        let minus = probe(&mut loss_fn, theta, i, -eps)?;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Fourth-order central stencil `(8[f(θ+ε) − f(θ−ε)] − [f(θ+2ε) − f(θ−2ε)]) / 12ε`.
///
/// Truncation error is O(ε⁴), so a larger step can be used and round-off drops to roughly
/// 1e-12 absolute for O(1) losses. Used where coordinates with tiny gradients must still be
/// resolved to a tight relative tolerance.
pub fn finite_diff_grad_five_point(
    mut loss_fn: impl FnMut(&Matrix) -> f64,
    theta: &Matrix,
    eps: f64,
) -> Result<Matrix> {
    if !(eps > 0.0) {
        return Err(Error::usage(format!(
            "finite difference step must be positive, got {eps}"
        )));
    }
    let mut grad = Matrix::zeros(theta.rows(), theta.cols());
    for i in 0..theta.len() {
        let p2 = probe(&mut loss_fn, theta, i, 2.0 * eps)?;
        let p1 = probe(&mut loss_fn, theta, i, eps)?;
        let m1 = probe(&mut loss_fn, theta, i, -eps)?;
        let m2 = probe(&mut loss_fn, theta, i, -2.0 * eps)?;
        grad.data_mut()[i] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
    }
    Ok(grad)
}

/// Largest coordinate-wise `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn grad_check(analytic: &Matrix, numeric: &Matrix, tol: f64) -> Result<GradCheckReport> {
    grad_check_with_floor(analytic, numeric, tol, 1e-12)
}

/// Like [`grad_check`] with an explicit denominator floor, for gradients near the
/// resolution of the finite-difference oracle.
pub fn grad_check_with_floor(analytic: &Matrix, numeric: &Matrix, tol: f64, floor: f64) -> Result<GradCheckReport> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::Shape {
            op: "grad_check",
            left: analytic.shape(),
            right: numeric.shape(),
        });
    }
    let mut worst = 0.0;
    let mut worst_idx = 0;
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > worst {
            worst = rel;
            worst_idx = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        worst_param_index: worst_idx,
        passed: worst <= tol,
    })
}
