//! Central finite differences for checking reverse-mode gradients.

use super::matrix::Matrix;
use crate::error::Result;

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Numerical gradient of `f` with respect to every entry of every matrix in
/// `params`, by `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference<F>(mut f: F, params: &[Matrix], h: f64) -> Result<Vec<Matrix>>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for b in 0..params.len() {
        let mut g = Matrix::zeros(params[b].rows(), params[b].cols());
        for e in 0..params[b].len() {
            let orig = params[b].data()[e];
            work[b].data_mut()[e] = orig + h;
            let plus = f(&work)?;
            work[b].data_mut()[e] = orig - h;
            let minus = f(&work)?;
            work[b].data_mut()[e] = orig;
            g.data_mut()[e] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// `max|a - n| / max(max|a|, max|n|)` over one parameter block; 0 when both
/// gradients vanish.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let scale = analytic.max_abs().max(numeric.max_abs());
    if scale == 0.0 {
        return 0.0;
    }
    analytic.max_abs_diff(numeric) / scale
}
