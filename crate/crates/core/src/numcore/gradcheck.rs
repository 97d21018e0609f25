use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `theta`.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        x[i] = theta[i] + h;
        let plus = f(&x);
        x[i] = theta[i] - h;
        let minus = f(&x);
        x[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i}: f(+h) = {plus}, f(-h) = {minus}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Central differences of a vector-valued `f`: entry `[k][i]` is the
/// derivative of output `k` with respect to coordinate `i`.
pub fn finite_diff_multi<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut x = theta.to_vec();
    let mut jac: Vec<Vec<f64>> = Vec::new();
    for i in 0..theta.len() {
        x[i] = theta[i] + h;
        let plus = f(&x)?;
        x[i] = theta[i] - h;
        let minus = f(&x)?;
        x[i] = theta[i];
        if jac.is_empty() {
            jac = vec![Vec::with_capacity(theta.len()); plus.len()];
        }
        for (k, (p, m)) in plus.iter().zip(&minus).enumerate() {
            if !p.is_finite() || !m.is_finite() {
                return Err(Error::NonFinite(format!(
                    "output {k} at coordinate {i}: f(+h) = {p}, f(-h) = {m}"
                )));
            }
            jac[k].push((p - m) / (2.0 * h));
        }
    }
    Ok(jac)
}

/// `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps coordinates whose true gradient is numerically zero
/// from dominating through round-off in the difference quotient.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}
