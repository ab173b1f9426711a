use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Smallest and largest diagonal jitter, relative to the signal variance.
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// Cholesky factorization with escalating diagonal jitter.
///
/// Tries the matrix as given, then adds `1e-10·scale·I`, growing tenfold up to
/// `1e-4·scale·I`. Returns the factor and the jitter that was added.
pub(crate) fn cholesky_jittered(
    m: &DMatrix<f64>,
    scale: f64,
    what: &'static str,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut jitter = 0.0;
    loop {
        let mut a = m.clone();
        if jitter > 0.0 {
            for i in 0..a.nrows() {
                a[(i, i)] += jitter;
            }
        }
        if let Some(chol) = Cholesky::new(a) {
            let diag_ok = chol.l_dirty().diagonal().iter().all(|v| v.is_finite() && *v > 0.0);
            if diag_ok {
                return Ok((chol, jitter));
            }
        }
        jitter = next_jitter(jitter, scale).ok_or(Error::NotPositiveDefinite(what))?;
    }
}

/// Next level of the jitter ladder, or `None` once it is exhausted.
pub(crate) fn next_jitter(current: f64, scale: f64) -> Option<f64> {
    if current == 0.0 {
        Some(JITTER_START * scale)
    } else if current * 10.0 <= JITTER_MAX * scale * (1.0 + 1e-9) {
        Some(current * 10.0)
    } else {
        None
    }
}

pub(crate) fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}
