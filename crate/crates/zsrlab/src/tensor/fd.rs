//! Central finite-difference gradient oracle, evaluated in 64-bit.

use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function: (f(θ+h·e_i) − f(θ−h·e_i)) / 2h.
///
/// The function is evaluated and the quotient accumulated entirely in f64 so
/// that oracle error stays well below the tolerance used when checking the
/// 32-bit autodiff path.
pub fn finite_diff_gradient<F>(f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::invalid(format!("finite_diff_gradient: h must be positive, got {h}")));
    }
    let mut work = theta.to_vec();
    let mut grad = vec![0.0f64; theta.len()];
    for i in 0..theta.len() {
        work[i] = theta[i] + h;
        let fp = f(&work)?;
        work[i] = theta[i] - h;
        let fm = f(&work)?;
        work[i] = theta[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("finite_diff_gradient at coordinate {i}")));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Like [`finite_diff_gradient`] but only for the listed coordinates;
/// unlisted entries stay zero. Used to spot-check large parameter vectors.
pub fn finite_diff_gradient_at<F>(f: F, theta: &[f64], h: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::invalid(format!("finite_diff_gradient: h must be positive, got {h}")));
    }
    let mut work = theta.to_vec();
    let mut grad = vec![0.0f64; theta.len()];
    for &i in coords {
        work[i] = theta[i] + h;
        let fp = f(&work)?;
        work[i] = theta[i] - h;
        let fm = f(&work)?;
        work[i] = theta[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("finite_diff_gradient at coordinate {i}")));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Relative error used by gradient checks: |a−b| / max(|a|, |b|, floor).
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
