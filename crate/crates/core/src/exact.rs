//! Dense GP regression: posterior prediction, log marginal likelihood and its
//! analytic gradient. Used for subset-of-data training and as the reference
//! the sparse approximation is checked against.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::kernel::{cross_cov_scaled, scaled_points, self_cov_scaled};
use crate::linalg::{cholesky_jittered, log_det};
use crate::types::GpHyperparams;

/// Negative variances above this threshold are treated as round-off and clamped.
pub const VARIANCE_CLAMP: f64 = -1e-10;

pub(crate) fn clamp_variance(v: f64) -> Result<f64> {
    if v < VARIANCE_CLAMP || v.is_nan() {
        Err(Error::NumericalNegativeVariance(v))
    } else {
        Ok(v.max(0.0))
    }
}

fn check_inputs(x: &DMatrix<f64>, y: &[f64], theta: &GpHyperparams) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::DimError {
            expected: 1,
            got: 0,
        });
    }
    if x.nrows() != y.len() {
        return Err(Error::LengthMismatch {
            what: "regressor rows and targets",
            left: x.nrows(),
            right: y.len(),
        });
    }
    if x.ncols() != theta.dim() {
        return Err(Error::DimError {
            expected: theta.dim(),
            got: x.ncols(),
        });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ExactGpFit {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub theta: GpHyperparams,
    /// Factor of `K(X,X) + σ²I` (plus jitter, if any was needed).
    pub chol: Cholesky<f64, Dyn>,
    pub alpha: DVector<f64>,
    pub jitter: f64,
    scaled: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct ExactPrediction {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    pub cov: Option<DMatrix<f64>>,
}

struct Factored {
    scaled: DMatrix<f64>,
    k_signal: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
}

fn factor(x: &DMatrix<f64>, y: &[f64], theta: &GpHyperparams) -> Result<Factored> {
    factor_with(x, y, theta, false)
}

fn factor_with(x: &DMatrix<f64>, y: &[f64], theta: &GpHyperparams, strict: bool) -> Result<Factored> {
    check_inputs(x, y, theta)?;
    let scaled = scaled_points(x, theta)?;
    let sf2 = theta.signal_var();
    let k_signal = self_cov_scaled(&scaled, sf2);
    let mut k = k_signal.clone();
    let sn2 = theta.noise_var();
    for i in 0..k.nrows() {
        k[(i, i)] += sn2;
    }
    let (chol, jitter) = if strict {
        let chol = Cholesky::new(k)
            .filter(|c| c.l_dirty().diagonal().iter().all(|v| v.is_finite() && *v > 0.0))
            .ok_or(Error::NotPositiveDefinite("K + σ²I"))?;
        (chol, 0.0)
    } else {
        cholesky_jittered(&k, sf2, "K + σ²I")?
    };
    let alpha = chol.solve(&DVector::from_column_slice(y));
    Ok(Factored {
        scaled,
        k_signal,
        chol,
        alpha,
        jitter,
    })
}

pub fn fit_exact(x: &DMatrix<f64>, y: &[f64], theta: &GpHyperparams) -> Result<ExactGpFit> {
    let f = factor(x, y, theta)?;
    Ok(ExactGpFit {
        x: x.clone(),
        y: DVector::from_column_slice(y),
        theta: theta.clone(),
        chol: f.chol,
        alpha: f.alpha,
        jitter: f.jitter,
        scaled: f.scaled,
    })
}

impl ExactGpFit {
    /// Posterior of the latent function at the rows of `xstar`.
    pub fn predict(&self, xstar: &DMatrix<f64>, full_cov: bool) -> Result<ExactPrediction> {
        let zs = scaled_points(xstar, &self.theta)?;
        let sf2 = self.theta.signal_var();
        let k_sx = cross_cov_scaled(&zs, &self.scaled, sf2);
        let mean = &k_sx * &self.alpha;
        let l = self.chol.l_dirty();
        let mut v = k_sx.transpose();
        if !l.solve_lower_triangular_mut(&mut v) {
            return Err(Error::NotPositiveDefinite("K + σ²I"));
        }
        let variance = v
            .column_iter()
            .map(|c| clamp_variance(sf2 - c.norm_squared()))
            .collect::<Result<Vec<_>>>()?;
        let cov = if full_cov {
            let kss = self_cov_scaled(&zs, sf2);
            let mut c = kss - v.transpose() * &v;
            for i in 0..c.nrows() {
                c[(i, i)] = variance[i];
            }
            Some(c)
        } else {
            None
        };
        Ok(ExactPrediction {
            mean,
            variance: DVector::from_vec(variance),
            cov,
        })
    }
}

pub fn predict_exact(fit: &ExactGpFit, xstar: &DMatrix<f64>, full_cov: bool) -> Result<ExactPrediction> {
    fit.predict(xstar, full_cov)
}

fn lml_from(f: &Factored, y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let yv = DVector::from_column_slice(y);
    -0.5 * yv.dot(&f.alpha) - 0.5 * log_det(&f.chol) - 0.5 * n * (2.0 * PI).ln()
}

/// `log N(y | 0, K_θ(X,X) + σ²I)`.
pub fn log_marginal_likelihood(x: &DMatrix<f64>, y: &[f64], theta: &GpHyperparams) -> Result<f64> {
    let f = factor(x, y, theta)?;
    Ok(lml_from(&f, y))
}

/// Log marginal likelihood and its gradient over `[log ℓ.., log σ_f, log σ]`.
///
/// With `W = ααᵀ - K⁻¹` each partial is `½ tr(W ∂K/∂θ_j)`, so after the single
/// factorization every parameter costs O(T²).
pub fn lml_and_grad(x: &DMatrix<f64>, y: &[f64], theta: &GpHyperparams) -> Result<(f64, Vec<f64>)> {
    grad_from(factor(x, y, theta)?, y, theta)
}

/// [`log_marginal_likelihood`] without the jitter fallback: fails with
/// `NotPositiveDefinite` where the plain factorization does. Used during
/// training, where jitter would make the objective jump.
pub fn log_marginal_likelihood_strict(x: &DMatrix<f64>, y: &[f64], theta: &GpHyperparams) -> Result<f64> {
    Ok(lml_from(&factor_with(x, y, theta, true)?, y))
}

/// [`lml_and_grad`] without the jitter fallback.
pub fn lml_and_grad_strict(x: &DMatrix<f64>, y: &[f64], theta: &GpHyperparams) -> Result<(f64, Vec<f64>)> {
    grad_from(factor_with(x, y, theta, true)?, y, theta)
}

fn grad_from(f: Factored, y: &[f64], theta: &GpHyperparams) -> Result<(f64, Vec<f64>)> {
    let value = lml_from(&f, y);
    let n = y.len();
    let d = theta.dim();
    let mut w = f.chol.inverse();
    w.neg_mut();
    w.ger(1.0, &f.alpha, &f.alpha, 1.0);

    let mut grad = vec![0.0; d + 2];
    let mut ls = vec![0.0; d];
    let mut sf = 0.0;
    for j in 0..n {
        let zj = f.scaled.column(j);
        let wcol = w.column(j);
        let kcol = f.k_signal.column(j);
        for i in 0..j {
            let wk = wcol[i] * kcol[i];
            sf += 2.0 * wk;
            let zi = f.scaled.column(i);
            for (acc, (a, b)) in ls.iter_mut().zip(zi.iter().zip(zj.iter())) {
                let r = a - b;
                *acc += 2.0 * wk * r * r;
            }
        }
        sf += wcol[j] * kcol[j];
    }
    for (g, v) in grad.iter_mut().zip(&ls) {
        *g = 0.5 * v;
    }
    grad[d] = sf;
    grad[d + 1] = theta.noise_var() * w.trace();
    Ok((value, grad))
}

pub fn lml_grad_theta(x: &DMatrix<f64>, y: &[f64], theta: &GpHyperparams) -> Result<Vec<f64>> {
    Ok(lml_and_grad(x, y, theta)?.1)
}
