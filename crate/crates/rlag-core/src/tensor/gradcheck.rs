//! Central finite differences, the oracle every gradient test is held to.
//!
//! Nothing here touches the tape: the functions re-evaluate the target
//! scalar function at perturbed inputs, so a bug in the reverse pass cannot
//! hide in its own oracle.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference gradient estimate of a scalar function over a flat
/// parameter slice: `(f(p + h·e_i) - f(p - h·e_i)) / 2h` per coordinate.
pub fn finite_diff_flat<F>(mut f: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        grad[i] = central_difference(&mut f, &mut work, i, h)?;
    }
    Ok(grad)
}

/// Central-difference estimate restricted to selected coordinates. Used where
/// the full parameter vector is too large to difference coordinate by
/// coordinate within the test budget.
pub fn finite_diff_at<F>(mut f: F, params: &[f64], coords: &[usize], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut grad = Vec::with_capacity(coords.len());
    for &i in coords {
        grad.push(central_difference(&mut f, &mut work, i, h)?);
    }
    Ok(grad)
}

/// Tensor-shaped wrapper over [`finite_diff_flat`].
pub fn finite_diff_gradient<F>(mut f: F, params: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let shape = params.shape().to_vec();
    let grad = finite_diff_flat(
        |flat| {
            let t = Tensor::new(shape.clone(), flat.to_vec())?;
            f(&t)
        },
        params.data(),
        h,
    )?;
    Tensor::new(params.shape().to_vec(), grad)
}

fn central_difference<F>(f: &mut F, work: &mut [f64], i: usize, h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let orig = work[i];
    work[i] = orig + h;
    let plus = f(work)?;
    work[i] = orig - h;
    let minus = f(work)?;
    work[i] = orig;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::domain(
            "finite-diff",
            format!("non-finite evaluation near coordinate {i}: f+={plus}, f-={minus}"),
        ));
    }
    Ok((plus - minus) / (2.0 * h))
}

/// Relative disagreement between an analytic and a differenced gradient
/// entry. Near-zero pairs are compared absolutely (the relative quotient is
/// meaningless in finite-difference round-off noise).
pub fn grad_error(analytic: f64, estimated: f64) -> f64 {
    let denom = analytic.abs().max(estimated.abs());
    if denom < 1e-7 {
        // both effectively zero: report the absolute gap against the
        // relative tolerance scale so callers can keep a single threshold
        (analytic - estimated).abs() * 1e2
    } else {
        (analytic - estimated).abs() / denom
    }
}

/// Maximum [`grad_error`] over paired gradient entries.
pub fn max_grad_error(analytic: &[f64], estimated: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(estimated)
        .map(|(&a, &e)| grad_error(a, e))
        .fold(0.0, f64::max)
}
