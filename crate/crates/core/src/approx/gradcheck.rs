use rand::seq::index::sample;

use crate::error::{arg, Result};
use crate::Rng;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn central_difference(f: &dyn Fn(&[f64]) -> f64, params: &[f64], i: usize, eps: f64) -> f64 {
    let mut p = params.to_vec();
    p[i] = params[i] + eps;
    let up = f(&p);
    p[i] = params[i] - eps;
    let down = f(&p);
    (up - down) / (2.0 * eps)
}

fn check_inputs(params: &[f64], analytic: &[f64], eps: f64) -> Result<()> {
    if params.len() != analytic.len() {
        return arg("analytic gradient and parameters differ in length");
    }
    if !(eps > 0.0 && eps <= 1e-3) {
        return arg(format!("finite-difference step {eps} outside (0, 1e-3]"));
    }
    Ok(())
}

/// Largest relative error between `analytic` and central differences of `f`
/// over every coordinate.
pub fn grad_check(f: &dyn Fn(&[f64]) -> f64, params: &[f64], analytic: &[f64], eps: f64) -> Result<f64> {
    check_inputs(params, analytic, eps)?;
    Ok((0..params.len())
        .map(|i| relative_error(analytic[i], central_difference(f, params, i, eps)))
        .fold(0.0, f64::max))
}

/// As [`grad_check`] but over `n` coordinates drawn without replacement
/// (all of them when `n >= params.len()`).
pub fn grad_check_subset(
    f: &dyn Fn(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
    n: usize,
    rng: &mut Rng,
) -> Result<f64> {
    check_inputs(params, analytic, eps)?;
    if n >= params.len() {
        return grad_check(f, params, analytic, eps);
    }
    Ok(sample(rng, params.len(), n)
        .into_iter()
        .map(|i| relative_error(analytic[i], central_difference(f, params, i, eps)))
        .fold(0.0, f64::max))
}
