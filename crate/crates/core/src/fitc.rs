//! FITC sparse GP: random inducing inputs, the pre-computed predictor and the
//! FITC marginal likelihood with its gradient.
//!
//! Notation follows the usual FITC algebra. With `L_M = chol(K_M)` and
//! `V = L_M⁻¹ K_MN`, the training covariance is `VᵀV + G` where
//! `G = diag(λ + σ²)` and `λ_n = K_nn - ‖V_n‖²`. Everything else goes through
//! `A = I + V G⁻¹ Vᵀ = L_M⁻¹ Q_M L_M⁻ᵀ`, which is never worse conditioned than
//! the identity.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::exact::clamp_variance;
use crate::kernel::{cross_cov_scaled, scaled_points, self_cov_scaled, sq_dist};
use crate::linalg::{log_det, next_jitter};
use crate::types::{GpHyperparams, Standardizer};

/// Inducing inputs, drawn as a subset of training rows.
#[derive(Clone, Debug, PartialEq)]
pub struct InducingSet {
    /// M×D inducing locations.
    pub xbar: DMatrix<f64>,
    /// Training-row index of every inducing point.
    pub indices: Vec<usize>,
    pub seed: u64,
}

impl InducingSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Same rows, taken from a different regressor matrix (e.g. after re-filtering).
    pub fn from_indices(x: &DMatrix<f64>, indices: Vec<usize>, seed: u64) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyInducing);
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.nrows()) {
            return Err(Error::IndexError {
                index: bad,
                count: x.nrows(),
            });
        }
        Ok(Self {
            xbar: x.select_rows(&indices),
            indices,
            seed,
        })
    }
}

/// Draws `m` distinct row indices out of `t`, uniformly, deterministically in `seed`.
pub fn sample_rows(t: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::EmptyInducing);
    }
    if m > t {
        return Err(Error::TooManyInducing {
            requested: m,
            available: t,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, t, m).into_vec())
}

pub fn select_inducing(x: &DMatrix<f64>, m: usize, seed: u64) -> Result<InducingSet> {
    let indices = sample_rows(x.nrows(), m, seed)?;
    InducingSet::from_indices(x, indices, seed)
}

fn check_shapes(x: &DMatrix<f64>, y: &[f64], inducing: &InducingSet, theta: &GpHyperparams) -> Result<()> {
    if inducing.is_empty() {
        return Err(Error::EmptyInducing);
    }
    if x.nrows() != y.len() {
        return Err(Error::LengthMismatch {
            what: "regressor rows and targets",
            left: x.nrows(),
            right: y.len(),
        });
    }
    for cols in [x.ncols(), inducing.xbar.ncols()] {
        if cols != theta.dim() {
            return Err(Error::DimError {
                expected: theta.dim(),
                got: cols,
            });
        }
    }
    Ok(())
}

/// Everything that depends on θ and the inputs but not on the targets.
struct Factors {
    zm: DMatrix<f64>,
    zn: DMatrix<f64>,
    kmm: DMatrix<f64>,
    kmn: DMatrix<f64>,
    /// Lower factor of `K_M + jitter·I`.
    lm: DMatrix<f64>,
    jitter: f64,
    /// `V = L_M⁻¹ K_MN`.
    v: DMatrix<f64>,
    /// `λ + σ²`.
    g: DVector<f64>,
    lambda_min: f64,
    chol_a: Cholesky<f64, Dyn>,
}

fn factorize(x: &DMatrix<f64>, xbar: &DMatrix<f64>, theta: &GpHyperparams) -> Result<Factors> {
    let sf2 = theta.signal_var();
    let sn2 = theta.noise_var();
    let zm = scaled_points(xbar, theta)?;
    let zn = scaled_points(x, theta)?;
    let kmm = self_cov_scaled(&zm, sf2);
    let kmn = cross_cov_scaled(&zm, &zn, sf2);

    // Jitter escalates both when K_M is not PD and when round-off drives some
    // λ_n clearly negative; extra jitter shrinks the Nyström diagonal.
    let mut jitter = 0.0;
    let (lm, v, lambda) = loop {
        let mut km = kmm.clone();
        for i in 0..km.nrows() {
            km[(i, i)] += jitter;
        }
        let attempt = Cholesky::new(km).and_then(|chol| {
            let lm = chol.unpack();
            let mut v = kmn.clone();
            lm.solve_lower_triangular_mut(&mut v).then_some(())?;
            let lambda: Vec<f64> = v.column_iter().map(|c| sf2 - c.norm_squared()).collect();
            let ok = lambda.iter().all(|l| l.is_finite() && *l >= -1e-10 * sf2);
            ok.then_some((lm, v, lambda))
        });
        if let Some(found) = attempt {
            break found;
        }
        jitter = next_jitter(jitter, sf2).ok_or(Error::NotPositiveDefinite("K_M"))?;
    };
    let lambda_min = lambda.iter().copied().fold(f64::INFINITY, f64::min);
    let g = DVector::from_iterator(lambda.len(), lambda.iter().map(|l| l.max(0.0) + sn2));

    let mut h = v.clone();
    for (mut col, gn) in h.column_iter_mut().zip(g.iter()) {
        col /= *gn;
    }
    let mut a = &h * v.transpose();
    for i in 0..a.nrows() {
        a[(i, i)] += 1.0;
    }
    let chol_a = Cholesky::new(a).ok_or(Error::NotPositiveDefinite("Q_M"))?;
    Ok(Factors {
        zm,
        zn,
        kmm,
        kmn,
        lm,
        jitter,
        v,
        g,
        lambda_min,
        chol_a,
    })
}

impl Factors {
    /// `G⁻¹ y` and `V G⁻¹ y`.
    fn weighted_targets(&self, y: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let ginv_y = DVector::from_iterator(y.len(), y.iter().zip(self.g.iter()).map(|(a, g)| a / g));
        let vgy = &self.v * &ginv_y;
        (ginv_y, vgy)
    }

    fn lml(&self, y: &[f64]) -> f64 {
        let (ginv_y, vgy) = self.weighted_targets(y);
        let yv = DVector::from_column_slice(y);
        let la = self.chol_a.l_dirty();
        let proj = la.solve_lower_triangular(&vgy).expect("A is positive definite");
        let quad = yv.dot(&ginv_y) - proj.norm_squared();
        let logdet = log_det(&self.chol_a) + self.g.iter().map(|g| g.ln()).sum::<f64>();
        -0.5 * quad - 0.5 * logdet - 0.5 * y.len() as f64 * (2.0 * PI).ln()
    }
}

/// Log density of `y` under `N(0, Q_NN + Λ + σ²I)`, in O(T·M²).
pub fn fitc_log_marginal_likelihood(
    x: &DMatrix<f64>,
    y: &[f64],
    inducing: &InducingSet,
    theta: &GpHyperparams,
) -> Result<f64> {
    check_shapes(x, y, inducing, theta)?;
    Ok(factorize(x, &inducing.xbar, theta)?.lml(y))
}

pub fn fitc_lml_grad(
    x: &DMatrix<f64>,
    y: &[f64],
    inducing: &InducingSet,
    theta: &GpHyperparams,
) -> Result<Vec<f64>> {
    Ok(fitc_lml_and_grad(x, y, inducing, theta)?.1)
}

/// FITC log marginal likelihood and its gradient over `[log ℓ.., log σ_f, log σ]`.
///
/// Writing `W = ββᵀ - C⁻¹` with `β = C⁻¹y`, `B = K_M⁻¹K_MN` and `w = diag(W)`,
/// every kernel partial reduces to
/// `tr(P̃ ∂K_NM) - ½ tr(R̃ ∂K_M) + ½ Σ w_n ∂K_nn`
/// with `P̃ = BW - B diag(w)` and `R̃ = BWBᵀ - B diag(w) Bᵀ`, both formed once.
pub fn fitc_lml_and_grad(
    x: &DMatrix<f64>,
    y: &[f64],
    inducing: &InducingSet,
    theta: &GpHyperparams,
) -> Result<(f64, Vec<f64>)> {
    check_shapes(x, y, inducing, theta)?;
    let f = factorize(x, &inducing.xbar, theta)?;
    let value = f.lml(y);
    let (t, m, d) = (x.nrows(), inducing.len(), theta.dim());
    let sf2 = theta.signal_var();
    let sn2 = theta.noise_var();
    let la = f.chol_a.l_dirty();
    let lmt = f.lm.transpose();

    // H = V G⁻¹ and U = L_A⁻¹ H
    let mut h = f.v.clone();
    for (mut col, gn) in h.column_iter_mut().zip(f.g.iter()) {
        col /= *gn;
    }
    let mut u = h.clone();
    la.solve_lower_triangular_mut(&mut u);

    // β = G⁻¹y - Hᵀ A⁻¹ V G⁻¹ y
    let (ginv_y, vgy) = f.weighted_targets(y);
    let ainv_vgy = f.chol_a.solve(&vgy);
    let beta = ginv_y - h.tr_mul(&ainv_vgy);

    // B = L_M⁻ᵀ V
    let mut b = f.v.clone();
    lmt.solve_upper_triangular_mut(&mut b);
    let bb = &b * &beta;

    // w_n = β_n² - (C⁻¹)_nn with (C⁻¹)_nn = 1/g_n - ‖U_n‖²
    let w = DVector::from_iterator(
        t,
        (0..t).map(|n| beta[n] * beta[n] - (1.0 / f.g[n] - u.column(n).norm_squared())),
    );

    // P̃ = b βᵀ - L_M⁻ᵀ A⁻¹ H - B diag(w)
    let mut p = u;
    la.tr_solve_lower_triangular_mut(&mut p);
    lmt.solve_upper_triangular_mut(&mut p);
    p.neg_mut();
    p.ger(1.0, &bb, &beta, 1.0);
    let mut bw = b.clone();
    for (mut col, wn) in bw.column_iter_mut().zip(w.iter()) {
        col *= *wn;
    }
    p -= &bw;

    // R̃ = b bᵀ - L_M⁻ᵀ (I - A⁻¹) L_M⁻¹ - B diag(w) Bᵀ
    let mut s = -f.chol_a.inverse();
    for i in 0..m {
        s[(i, i)] += 1.0;
    }
    lmt.solve_upper_triangular_mut(&mut s);
    let mut s = s.transpose();
    lmt.solve_upper_triangular_mut(&mut s);
    let mut r = -s;
    r.ger(1.0, &bb, &bb, 1.0);
    r -= bw * b.transpose();

    let mut ls = vec![0.0; d];
    let mut sf = 0.0;
    for n in 0..t {
        let zn = f.zn.column(n);
        for mi in 0..m {
            let pk = p[(mi, n)] * f.kmn[(mi, n)];
            if pk == 0.0 {
                continue;
            }
            sf += 2.0 * pk;
            for (acc, (a, c)) in ls.iter_mut().zip(f.zm.column(mi).iter().zip(zn.iter())) {
                let diff = a - c;
                *acc += pk * diff * diff;
            }
        }
    }
    for j in 0..m {
        let zj = f.zm.column(j);
        for i in 0..m {
            let rk = r[(i, j)] * f.kmm[(i, j)];
            sf -= rk;
            if i != j {
                let dist = f.zm.column(i);
                for (acc, (a, c)) in ls.iter_mut().zip(dist.iter().zip(zj.iter())) {
                    let diff = a - c;
                    *acc -= 0.5 * rk * diff * diff;
                }
            }
        }
    }
    let wsum = w.sum();
    let mut grad = ls;
    grad.push(sf + sf2 * wsum);
    grad.push(sn2 * wsum);
    Ok((value, grad))
}

/// Pre-computed FITC predictor: O(M) means, O(M²) variances.
#[derive(Clone, Debug)]
pub struct FitcPredictor {
    /// Inducing inputs in model (standardized) coordinates.
    pub xbar: DMatrix<f64>,
    pub theta: GpHyperparams,
    /// Lower factor of `K_M` (with jitter, if any).
    pub chol_km: DMatrix<f64>,
    /// Lower factor of `A = L_M⁻¹ Q_M L_M⁻ᵀ`; `chol(Q_M) = chol_km · chol_a`.
    pub chol_a: DMatrix<f64>,
    /// `Q_M⁻¹ K_MN (Λ + σ²I)⁻¹ y`.
    pub mean_weights: DVector<f64>,
    pub jitter: f64,
    pub lambda_min: f64,
    /// Maps raw regressors and targets to and from model coordinates.
    pub scaler: Standardizer,
    zm: DMatrix<f64>,
}

pub fn fitc_precompute(
    x: &DMatrix<f64>,
    y: &[f64],
    inducing: &InducingSet,
    theta: &GpHyperparams,
) -> Result<FitcPredictor> {
    check_shapes(x, y, inducing, theta)?;
    let f = factorize(x, &inducing.xbar, theta)?;
    let (_, vgy) = f.weighted_targets(y);
    let mut wts = f.chol_a.solve(&vgy);
    f.lm.tr_solve_lower_triangular_mut(&mut wts);
    Ok(FitcPredictor {
        xbar: inducing.xbar.clone(),
        theta: theta.clone(),
        chol_km: f.lm,
        chol_a: f.chol_a.unpack(),
        mean_weights: wts,
        jitter: f.jitter,
        lambda_min: f.lambda_min,
        scaler: Standardizer::identity(theta.dim()),
        zm: f.zm,
    })
}

pub fn fitc_predict(pred: &FitcPredictor, xstar: &[f64]) -> Result<(f64, f64)> {
    pred.predict(xstar, false)
}

impl FitcPredictor {
    /// Rebuilds a predictor from stored factors.
    pub fn from_parts(
        xbar: DMatrix<f64>,
        theta: GpHyperparams,
        chol_km: DMatrix<f64>,
        chol_a: DMatrix<f64>,
        mean_weights: DVector<f64>,
        scaler: Standardizer,
    ) -> Result<Self> {
        let m = xbar.nrows();
        if m == 0 {
            return Err(Error::EmptyInducing);
        }
        for (what, got) in [
            (chol_km.nrows(), chol_km.ncols()),
            (chol_a.nrows(), chol_a.ncols()),
            (mean_weights.len(), m),
        ] {
            if what != m || got != m {
                return Err(Error::DimError {
                    expected: m,
                    got: what.max(got),
                });
            }
        }
        if scaler.dim() != theta.dim() {
            return Err(Error::DimError {
                expected: theta.dim(),
                got: scaler.dim(),
            });
        }
        let zm = scaled_points(&xbar, &theta)?;
        Ok(Self {
            xbar,
            theta,
            chol_km,
            chol_a,
            mean_weights,
            jitter: 0.0,
            lambda_min: 0.0,
            scaler,
            zm,
        })
    }

    pub fn with_scaler(mut self, scaler: Standardizer) -> Self {
        self.scaler = scaler;
        self
    }

    pub fn num_inducing(&self) -> usize {
        self.xbar.nrows()
    }

    pub fn dim(&self) -> usize {
        self.theta.dim()
    }

    /// Lower Cholesky factor of `Q_M`.
    pub fn chol_qm(&self) -> DMatrix<f64> {
        &self.chol_km * &self.chol_a
    }

    fn k_star(&self, xstar: &[f64]) -> Result<DVector<f64>> {
        if xstar.len() != self.dim() {
            return Err(Error::DimError {
                expected: self.dim(),
                got: xstar.len(),
            });
        }
        let zs: Vec<f64> = self
            .scaler
            .standardize_row(xstar)
            .iter()
            .zip(&self.theta.log_lengthscales)
            .map(|(v, l)| v / l.exp())
            .collect();
        let sf2 = self.theta.signal_var();
        Ok(DVector::from_iterator(
            self.zm.ncols(),
            self.zm.column_iter().map(|c| sf2 * (-0.5 * sq_dist(c.as_slice(), &zs)).exp()),
        ))
    }

    /// Predictive mean in output units. O(M) after the kernel row.
    pub fn predict_mean(&self, xstar: &[f64]) -> Result<f64> {
        let ks = self.k_star(xstar)?;
        Ok(self.scaler.unstandardize_mean(ks.dot(&self.mean_weights)))
    }

    /// Predictive mean and latent variance in output units; `include_noise`
    /// adds the likelihood variance σ².
    pub fn predict(&self, xstar: &[f64], include_noise: bool) -> Result<(f64, f64)> {
        let ks = self.k_star(xstar)?;
        let mean = ks.dot(&self.mean_weights);
        let a = self
            .chol_km
            .solve_lower_triangular(&ks)
            .ok_or(Error::NotPositiveDefinite("K_M"))?;
        let b = self
            .chol_a
            .solve_lower_triangular(&a)
            .ok_or(Error::NotPositiveDefinite("Q_M"))?;
        let mut var = clamp_variance(self.theta.signal_var() - a.norm_squared() + b.norm_squared())?;
        if include_noise {
            var += self.theta.noise_var();
        }
        Ok((self.scaler.unstandardize_mean(mean), self.scaler.unstandardize_var(var)))
    }

    /// Row-wise [`predict`](Self::predict) over a Q×D matrix, parallel over rows.
    pub fn predict_batch(&self, rows: &DMatrix<f64>, include_noise: bool) -> Result<(Vec<f64>, Vec<f64>)> {
        let out: Vec<(f64, f64)> = (0..rows.nrows())
            .into_par_iter()
            .map(|i| {
                let r: Vec<f64> = rows.row(i).iter().copied().collect();
                self.predict(&r, include_noise)
            })
            .collect::<Result<_>>()?;
        Ok(out.into_iter().unzip())
    }

    pub fn predict_mean_batch(&self, rows: &DMatrix<f64>) -> Result<Vec<f64>> {
        (0..rows.nrows())
            .into_par_iter()
            .map(|i| {
                let r: Vec<f64> = rows.row(i).iter().copied().collect();
                self.predict_mean(&r)
            })
            .collect()
    }

    /// Likelihood noise variance in output units.
    pub fn noise_var(&self) -> f64 {
        self.scaler.unstandardize_var(self.theta.noise_var())
    }

    /// Prior latent variance in output units.
    pub fn prior_var(&self) -> f64 {
        self.scaler.unstandardize_var(self.theta.signal_var())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{fit_exact, lml_and_grad, log_marginal_likelihood};
    use rand::{Rng, SeedableRng};

    fn problem(seed: u64, n: usize, d: usize) -> (DMatrix<f64>, Vec<f64>, GpHyperparams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let s: f64 = x.row(i).iter().map(|v: &f64| (1.3 * v).sin()).sum();
                s + 0.1 * rng.random_range(-1.0..1.0)
            })
            .collect();
        let theta = GpHyperparams {
            log_lengthscales: (0..d).map(|_| rng.random_range(-0.3..0.5)).collect(),
            log_signal_std: rng.random_range(-0.3..0.3),
            log_noise_std: rng.random_range(-2.0..-1.0),
        };
        (x, y, theta)
    }

    fn all_rows(x: &DMatrix<f64>) -> InducingSet {
        InducingSet::from_indices(x, (0..x.nrows()).collect(), 0).unwrap()
    }

    #[test]
    fn exhaustive_draw_is_a_permutation() {
        let x = DMatrix::from_fn(9, 1, |i, _| i as f64);
        let set = select_inducing(&x, 9, 4).unwrap();
        let mut idx = set.indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..9).collect::<Vec<_>>());
        for (r, &i) in set.indices.iter().enumerate() {
            assert_eq!(set.xbar[(r, 0)], i as f64);
        }
    }

    #[test]
    fn draws_are_deterministic() {
        let x = DMatrix::from_fn(50, 2, |i, j| (i * 2 + j) as f64);
        assert_eq!(select_inducing(&x, 10, 7).unwrap(), select_inducing(&x, 10, 7).unwrap());
    }

    #[test]
    fn single_draw_is_uniform() {
        let mut counts = [0usize; 3];
        for seed in 0..3000 {
            counts[sample_rows(3, 1, seed).unwrap()[0]] += 1;
        }
        for c in counts {
            let freq = c as f64 / 3000.0;
            assert!((freq - 1.0 / 3.0).abs() < 0.03, "{counts:?}");
        }
    }

    #[test]
    fn invalid_sizes() {
        let x = DMatrix::zeros(4, 1);
        assert!(matches!(select_inducing(&x, 5, 0), Err(Error::TooManyInducing { .. })));
        assert!(matches!(select_inducing(&x, 0, 0), Err(Error::EmptyInducing)));
    }

    #[test]
    fn full_inducing_set_zeroes_lambda() {
        let (x, y, theta) = problem(1, 30, 2);
        let p = fitc_precompute(&x, &y, &all_rows(&x), &theta).unwrap();
        let f = factorize(&x, &x, &theta).unwrap();
        for (g, _) in f.g.iter().zip(0..) {
            assert!((g - theta.noise_var()).abs() < 1e-8);
        }
        assert!(p.lambda_min.abs() < 1e-8);
    }

    #[test]
    fn scalar_q_m_by_hand() {
        // λ = 0, so Q_M = σ_f² + σ_f⁴/σ²
        let x = DMatrix::from_element(1, 1, 0.4);
        let (sf, sn) = (1.3f64, 0.5f64);
        let theta = GpHyperparams::isotropic(1, 0.7, sf, sn);
        let p = fitc_precompute(&x, &[1.0], &all_rows(&x), &theta).unwrap();
        let q = p.chol_qm()[(0, 0)].powi(2);
        let expected = sf.powi(2) + sf.powi(4) / sn.powi(2);
        assert!((q - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn single_inducing_point_by_hand() {
        // x = {0, 1}, inducing at 0, ℓ = σ_f = 1, σ = 0.5, y = (1, -1)
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let y = [1.0, -1.0];
        let theta = GpHyperparams::isotropic(1, 1.0, 1.0, 0.5);
        let inducing = InducingSet::from_indices(&x, vec![0], 0).unwrap();
        let p = fitc_precompute(&x, &y, &inducing, &theta).unwrap();

        let e = (-0.5f64).exp();
        let lam = [0.0, 1.0 - e * e];
        let g = [0.25 + lam[0], 0.25 + lam[1]];
        let kmn = [1.0, e];
        let qm = 1.0 + kmn[0] * kmn[0] / g[0] + kmn[1] * kmn[1] / g[1];
        let wy = kmn[0] * y[0] / g[0] + kmn[1] * y[1] / g[1];
        let xs = 0.3f64;
        let ks = (-0.5 * xs * xs).exp();
        let mu = ks * wy / qm;
        let var = 1.0 - ks * (1.0 - 1.0 / qm) * ks;
        let (m, v) = p.predict(&[xs], false).unwrap();
        assert!((m - mu).abs() < 1e-12);
        assert!((v - var).abs() < 1e-12);

        // marginal likelihood of the 2×2 covariance Q_NN + Λ + σ²I
        let c = [[kmn[0] * kmn[0] + lam[0] + 0.25, kmn[0] * kmn[1]], [kmn[0] * kmn[1], kmn[1] * kmn[1] + lam[1] + 0.25]];
        let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
        let quad = (c[1][1] * y[0] * y[0] - 2.0 * c[0][1] * y[0] * y[1] + c[0][0] * y[1] * y[1]) / det;
        let lml = -0.5 * quad - 0.5 * det.ln() - (2.0 * PI).ln();
        let got = fitc_log_marginal_likelihood(&x, &y, &inducing, &theta).unwrap();
        assert!((got - lml).abs() < 1e-12);
    }

    #[test]
    fn degenerate_fitc_equals_exact_gp() {
        let (x, y, theta) = problem(2, 40, 3);
        let inducing = select_inducing(&x, 40, 9).unwrap();
        let p = fitc_precompute(&x, &y, &inducing, &theta).unwrap();
        let exact = fit_exact(&x, &y, &theta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = DMatrix::from_fn(20, 3, |_, _| rng.random_range(-2.5..2.5));
        let ep = exact.predict(&q, false).unwrap();
        for i in 0..20 {
            let row: Vec<f64> = q.row(i).iter().copied().collect();
            let (m, v) = p.predict(&row, false).unwrap();
            assert!((m - ep.mean[i]).abs() < 1e-8);
            assert!((v - ep.variance[i]).abs() < 1e-8);
        }
        let lf = fitc_log_marginal_likelihood(&x, &y, &inducing, &theta).unwrap();
        let le = log_marginal_likelihood(&x, &y, &theta).unwrap();
        assert!((lf - le).abs() < 1e-8);
        let (_, gf) = fitc_lml_and_grad(&x, &y, &inducing, &theta).unwrap();
        let (_, ge) = lml_and_grad(&x, &y, &theta).unwrap();
        for (a, b) in gf.iter().zip(&ge) {
            assert!((a - b).abs() < 1e-6, "{gf:?} vs {ge:?}");
        }
    }

    #[test]
    fn prior_reversion_far_away() {
        let (x, y, theta) = problem(4, 30, 2);
        let inducing = select_inducing(&x, 10, 1).unwrap();
        let p = fitc_precompute(&x, &y, &inducing, &theta).unwrap();
        let (m, v) = p.predict(&[100.0, -80.0], false).unwrap();
        assert!(m.abs() < 1e-6);
        assert!((v - theta.signal_var()).abs() < 1e-6);
        let (_, vn) = p.predict(&[100.0, -80.0], true).unwrap();
        assert!((vn - v - theta.noise_var()).abs() < 1e-12);
    }

    #[test]
    fn lambdas_nonnegative_and_variance_grows_off_data() {
        for seed in 0..5 {
            let (x, y, theta) = problem(10 + seed, 60, 2);
            let inducing = select_inducing(&x, 15, seed).unwrap();
            let f = factorize(&x, &inducing.xbar, &theta).unwrap();
            assert!(f.lambda_min >= -1e-10);
            let p = fitc_precompute(&x, &y, &inducing, &theta).unwrap();
            let row: Vec<f64> = x.row(0).iter().copied().collect();
            let (_, near) = p.predict(&row, false).unwrap();
            let ell = theta.lengthscales().into_iter().fold(0.0, f64::max);
            let (_, far) = p.predict(&[2.0 + 10.0 * ell, -2.0 - 10.0 * ell], false).unwrap();
            assert!(near <= far);
        }
    }

    #[test]
    fn sparse_lml_does_not_exceed_exact_on_smooth_data() {
        for seed in [21, 22, 23] {
            let (x, y, theta) = problem(seed, 80, 2);
            let inducing = select_inducing(&x, 20, seed).unwrap();
            let lf = fitc_log_marginal_likelihood(&x, &y, &inducing, &theta).unwrap();
            let le = log_marginal_likelihood(&x, &y, &theta).unwrap();
            assert!(lf <= le + 1e-6, "seed {seed}: {lf} > {le}");
        }
    }

    #[test]
    fn lml_is_permutation_invariant() {
        let (x, y, theta) = problem(5, 40, 2);
        let inducing = select_inducing(&x, 12, 2).unwrap();
        let perm: Vec<usize> = (0..40).map(|i| (i * 7) % 40).collect();
        let xp = x.select_rows(&perm);
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let a = fitc_log_marginal_likelihood(&x, &y, &inducing, &theta).unwrap();
        let b = fitc_log_marginal_likelihood(&xp, &yp, &inducing, &theta).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let h = 1e-5;
        for seed in 0..8u64 {
            let (x, y, theta) = problem(100 + seed, 35, 2 + (seed as usize % 3));
            let inducing = select_inducing(&x, 8, seed).unwrap();
            let g = fitc_lml_grad(&x, &y, &inducing, &theta).unwrap();
            let base = theta.to_vec();
            for j in 0..base.len() {
                let mut v = base.clone();
                v[j] += h;
                let p = fitc_log_marginal_likelihood(&x, &y, &inducing, &GpHyperparams::from_slice(&v).unwrap()).unwrap();
                v[j] -= 2.0 * h;
                let m = fitc_log_marginal_likelihood(&x, &y, &inducing, &GpHyperparams::from_slice(&v).unwrap()).unwrap();
                let fd = (p - m) / (2.0 * h);
                assert!((g[j] - fd).abs() <= 1e-4 * g[j].abs().max(1e-2), "seed {seed} param {j}: {} vs {fd}", g[j]);
            }
        }
    }

    #[test]
    fn zero_targets_kill_data_term() {
        let (x, _, theta) = problem(6, 25, 2);
        let y = vec![0.0; 25];
        let inducing = select_inducing(&x, 6, 0).unwrap();
        let (v, g) = fitc_lml_and_grad(&x, &y, &inducing, &theta).unwrap();
        // with y = 0 the value is pure log-determinant and β = 0
        let f = factorize(&x, &inducing.xbar, &theta).unwrap();
        let logdet = log_det(&f.chol_a) + f.g.iter().map(|g| g.ln()).sum::<f64>();
        assert!((v + 0.5 * logdet + 12.5 * (2.0 * PI).ln()).abs() < 1e-10);
        assert!(g.iter().all(|c| c.is_finite()));
        assert!(g[3] < 0.0, "noise gradient at y = 0 must push σ down");
    }

    #[test]
    fn batch_matches_pointwise() {
        let (x, y, theta) = problem(7, 50, 2);
        let inducing = select_inducing(&x, 10, 3).unwrap();
        let p = fitc_precompute(&x, &y, &inducing, &theta).unwrap();
        let (m, v) = p.predict_batch(&x, true).unwrap();
        let means = p.predict_mean_batch(&x).unwrap();
        for i in 0..50 {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            let (mi, vi) = p.predict(&row, true).unwrap();
            assert_eq!(m[i], mi);
            assert_eq!(v[i], vi);
            assert_eq!(means[i], mi);
        }
    }
}
