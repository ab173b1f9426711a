//! Squared-exponential covariance with automatic relevance determination.
//!
//! `k(a, b) = σ_f² exp(-½ Σ_d (a_d - b_d)² / ℓ_d²)`
//!
//! Point sets are matrices with one point per row. Internally the points are
//! transposed and divided by their lengthscales so each point is a contiguous
//! column, which is the layout every hot loop in this crate iterates over.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::GpHyperparams;

/// Output entries per matrix above which assembly fans out over columns.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct KernelEval {
    pub value: f64,
    /// Partials with respect to `[log ℓ_1..log ℓ_D, log σ_f]`.
    pub grad_theta: Option<Vec<f64>>,
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimError { expected, got });
    }
    Ok(())
}

pub fn k_se_ard(x: &[f64], x2: &[f64], theta: &GpHyperparams) -> Result<f64> {
    Ok(k_se_ard_eval(x, x2, theta, false)?.value)
}

pub fn k_se_ard_eval(
    x: &[f64],
    x2: &[f64],
    theta: &GpHyperparams,
    with_grad: bool,
) -> Result<KernelEval> {
    let d = theta.dim();
    check_dim(d, x.len())?;
    check_dim(d, x2.len())?;
    let r2: Vec<f64> = x
        .iter()
        .zip(x2)
        .zip(&theta.log_lengthscales)
        .map(|((a, b), ll)| {
            let r = (a - b) / ll.exp();
            r * r
        })
        .collect();
    let value = theta.signal_var() * (-0.5 * r2.iter().sum::<f64>()).exp();
    let grad_theta = with_grad.then(|| {
        let mut g: Vec<f64> = r2.iter().map(|r| value * r).collect();
        g.push(2.0 * value);
        g
    });
    Ok(KernelEval { value, grad_theta })
}

/// Transposed copy of `points` (n×D) with each coordinate divided by its lengthscale.
pub(crate) fn scaled_points(points: &DMatrix<f64>, theta: &GpHyperparams) -> Result<DMatrix<f64>> {
    check_dim(theta.dim(), points.ncols())?;
    let inv: Vec<f64> = theta.log_lengthscales.iter().map(|l| (-l).exp()).collect();
    let mut z = points.transpose();
    for mut col in z.column_iter_mut() {
        for (v, s) in col.iter_mut().zip(&inv) {
            *v *= s;
        }
    }
    Ok(z)
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cross covariance between two scaled point sets (columns of `za`, `zb`).
pub(crate) fn cross_cov_scaled(za: &DMatrix<f64>, zb: &DMatrix<f64>, signal_var: f64) -> DMatrix<f64> {
    let (na, nb) = (za.ncols(), zb.ncols());
    let mut out = DMatrix::zeros(na, nb);
    if na == 0 || nb == 0 {
        return out;
    }
    let fill = |j: usize, col: &mut [f64]| {
        let b = zb.column(j);
        let b = b.as_slice();
        for (i, v) in col.iter_mut().enumerate() {
            *v = signal_var * (-0.5 * sq_dist(za.column(i).as_slice(), b)).exp();
        }
    };
    let data = out.as_mut_slice();
    if na * nb >= PAR_THRESHOLD {
        data.par_chunks_mut(na).enumerate().for_each(|(j, c)| fill(j, c));
    } else {
        data.chunks_mut(na).enumerate().for_each(|(j, c)| fill(j, c));
    }
    out
}

/// Symmetric covariance of a scaled point set with itself; the diagonal is exactly σ_f².
pub(crate) fn self_cov_scaled(z: &DMatrix<f64>, signal_var: f64) -> DMatrix<f64> {
    let mut k = cross_cov_scaled(z, z, signal_var);
    let n = k.nrows();
    for i in 0..n {
        k[(i, i)] = signal_var;
        for j in 0..i {
            // exact symmetry regardless of summation order
            k[(j, i)] = k[(i, j)];
        }
    }
    k
}

/// `K(A, B)` with entry `(i, j) = k(a_i, b_j)`.
pub fn k_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, theta: &GpHyperparams) -> Result<DMatrix<f64>> {
    let za = scaled_points(a, theta)?;
    let zb = scaled_points(b, theta)?;
    Ok(cross_cov_scaled(&za, &zb, theta.signal_var()))
}

/// Element-wise partial of `K(A, B)` with respect to one unconstrained kernel
/// parameter: indices `0..D` are log-lengthscales, `D` is the log signal std.
pub fn k_matrix_grad(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    theta: &GpHyperparams,
    which: usize,
) -> Result<DMatrix<f64>> {
    let d = theta.dim();
    if which > d {
        return Err(Error::IndexError {
            index: which,
            count: d + 1,
        });
    }
    let k = k_matrix(a, b, theta)?;
    if which == d {
        return Ok(k * 2.0);
    }
    let inv_l2 = (-2.0 * theta.log_lengthscales[which]).exp();
    Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let diff = a[(i, which)] - b[(j, which)];
        k[(i, j)] * diff * diff * inv_l2
    }))
}
