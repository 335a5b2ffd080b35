use alloc::vec::Vec;

use crate::{Error, Result};

/// Largest relative disagreement between an analytic gradient and central
/// differences.
///
/// `loss_fn` returns the loss and its analytic gradient at the given point.
/// For each coordinate the error is
/// `|analytic − (L(θ+h) − L(θ−h)) / 2h| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(mut loss_fn: F, params: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (loss, analytic) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss at base point".into()));
    }
    if analytic.len() != params.len() {
        return Err(Error::shape("finite_diff_check", "gradient length differs from params"));
    }
    let mut theta = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let plus = loss_fn(&theta)?.0;
        theta[i] = orig - h;
        let minus = loss_fn(&theta)?.0;
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("perturbed loss".into()));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
