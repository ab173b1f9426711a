//! Shared domain types: datasets, model orders, parameter vectors and the
//! standardization transform.
//!
//! Every tunable quantity is stored in unconstrained coordinates: logs for
//! positive scales and a logit for the normalized filter cutoff.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logistic sigmoid, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let z = x.exp();
        z / (1.0 + z)
    }
}

pub fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

/// Paired input/output record of a single-input single-output system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    /// Sample period in seconds. Carried for I/O only.
    pub dt: f64,
}

impl TimeSeriesDataset {
    pub fn new(u: Vec<f64>, y: Vec<f64>, dt: f64) -> Result<Self> {
        let ds = Self { u, y, dt };
        ds.check()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Contiguous sub-range `[start, end)` of both channels.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            u: self.u[start..end].to_vec(),
            y: self.y[start..end].to_vec(),
            dt: self.dt,
        }
    }

    fn check(&self) -> Result<()> {
        if self.u.len() != self.y.len() {
            return Err(Error::LengthMismatch {
                what: "input and output channels",
                left: self.u.len(),
                right: self.y.len(),
            });
        }
        if self.y.is_empty() {
            return Err(Error::TooShortForOrder {
                len: 0,
                required: 0,
            });
        }
        check_finite("u", &self.u)?;
        check_finite("y", &self.y)
    }
}

pub(crate) fn check_finite(channel: &'static str, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFiniteSample { channel, index }),
        None => Ok(()),
    }
}

/// Lag structure of a NARX model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelOrder {
    /// Number of past outputs.
    pub na: usize,
    /// Number of past inputs.
    pub nb: usize,
    /// Input delay in samples (at least 1).
    pub nk: usize,
}

impl ModelOrder {
    pub fn new(na: usize, nb: usize, nk: usize) -> Result<Self> {
        let order = Self { na, nb, nk };
        order.check()?;
        Ok(order)
    }

    pub fn check(&self) -> Result<()> {
        if self.na + self.nb == 0 {
            return Err(Error::InvalidOrder("na + nb must be at least 1".into()));
        }
        if self.nk == 0 {
            return Err(Error::InvalidOrder("input delay nk must be at least 1".into()));
        }
        Ok(())
    }

    /// Regressor dimension.
    pub fn dim(&self) -> usize {
        self.na + self.nb
    }

    /// Index of the first sample that has a complete lag window.
    pub fn first_target(&self) -> usize {
        if self.nb == 0 {
            self.na
        } else {
            self.na.max(self.nb + self.nk - 1)
        }
    }

    /// Number of regressor rows available from a series of length `n`.
    pub fn rows_for(&self, n: usize) -> usize {
        n.saturating_sub(self.first_target())
    }
}

/// Checks the dataset invariants and that at least two regressor rows exist.
pub fn validate_dataset(ds: &TimeSeriesDataset, order: &ModelOrder) -> Result<()> {
    order.check()?;
    ds.check()?;
    let required = order.first_target() + 1;
    if ds.len() <= required {
        return Err(Error::TooShortForOrder {
            len: ds.len(),
            required,
        });
    }
    Ok(())
}

/// GP hyper-parameters: ARD lengthscales, signal and noise deviations, all as logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    pub log_lengthscales: Vec<f64>,
    pub log_signal_std: f64,
    pub log_noise_std: f64,
}

impl GpHyperparams {
    pub fn new(lengthscales: &[f64], signal_std: f64, noise_std: f64) -> Self {
        Self {
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_signal_std: signal_std.ln(),
            log_noise_std: noise_std.ln(),
        }
    }

    pub fn isotropic(dim: usize, lengthscale: f64, signal_std: f64, noise_std: f64) -> Self {
        Self::new(&vec![lengthscale; dim], signal_std, noise_std)
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    /// Number of free parameters: D lengthscales, signal std, noise std.
    pub fn len(&self) -> usize {
        self.dim() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    pub fn signal_var(&self) -> f64 {
        (2.0 * self.log_signal_std).exp()
    }

    pub fn noise_var(&self) -> f64 {
        (2.0 * self.log_noise_std).exp()
    }

    /// Flat layout `[log ℓ_1..log ℓ_D, log σ_f, log σ]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.log_lengthscales.clone();
        v.push(self.log_signal_std);
        v.push(self.log_noise_std);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() < 3 {
            return Err(Error::DimError {
                expected: 3,
                got: v.len(),
            });
        }
        let d = v.len() - 2;
        Ok(Self {
            log_lengthscales: v[..d].to_vec(),
            log_signal_std: v[d],
            log_noise_std: v[d + 1],
        })
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

/// Pre-processing parameters: the logit of the normalized low-pass cutoff.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessParams {
    pub logit_cutoff: f64,
}

impl PreprocessParams {
    pub fn from_cutoff(c: f64) -> Result<Self> {
        if !(c > 0.0 && c < 1.0) {
            return Err(Error::InvalidCutoff(c));
        }
        Ok(Self {
            logit_cutoff: logit(c),
        })
    }

    /// Cutoff as a fraction of the Nyquist frequency.
    pub fn cutoff(&self) -> f64 {
        sigmoid(self.logit_cutoff)
    }
}

/// Constrained view of [`FullParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConstrainedParams {
    pub cutoff: f64,
    pub lengthscales: Vec<f64>,
    pub signal_std: f64,
    pub noise_std: f64,
}

/// Joint parameter vector: pre-processing plus GP hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullParams {
    pub omega: PreprocessParams,
    pub theta: GpHyperparams,
}

impl FullParams {
    pub fn to_constrained(&self) -> Result<ConstrainedParams> {
        if !self.omega.logit_cutoff.is_finite() || !self.theta.is_finite() {
            return Err(Error::InvalidParams("non-finite parameter".into()));
        }
        Ok(ConstrainedParams {
            cutoff: self.omega.cutoff(),
            lengthscales: self.theta.lengthscales(),
            signal_std: self.theta.log_signal_std.exp(),
            noise_std: self.theta.log_noise_std.exp(),
        })
    }

    pub fn from_constrained(c: &ConstrainedParams) -> Result<Self> {
        let positive = c
            .lengthscales
            .iter()
            .chain([&c.signal_std, &c.noise_std])
            .all(|v| v.is_finite() && *v > 0.0);
        if !positive {
            return Err(Error::InvalidParams("scales must be positive".into()));
        }
        Ok(Self {
            omega: PreprocessParams::from_cutoff(c.cutoff)?,
            theta: GpHyperparams::new(&c.lengthscales, c.signal_std, c.noise_std),
        })
    }

    /// Flat layout `[logit c, θ...]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.omega.logit_cutoff];
        v.extend(self.theta.to_vec());
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::DimError {
                expected: 4,
                got: 0,
            });
        }
        Ok(Self {
            omega: PreprocessParams {
                logit_cutoff: v[0],
            },
            theta: GpHyperparams::from_slice(&v[1..])?,
        })
    }
}

/// Per-column affine scaling of regressors and target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    // constant columns pass through unscaled
    (mean, if std > 0.0 && std.is_finite() { std } else { 1.0 })
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            x_mean: vec![0.0; dim],
            x_std: vec![1.0; dim],
            y_mean: 0.0,
            y_std: 1.0,
        }
    }

    /// Fits means and (population) deviations of each column of `x` and of `y`.
    pub fn fit(x: &DMatrix<f64>, y: &[f64]) -> Self {
        let (x_mean, x_std) = (0..x.ncols())
            .map(|j| mean_std(x.column(j).iter().copied()))
            .unzip();
        let (y_mean, y_std) = mean_std(y.iter().copied());
        Self {
            x_mean,
            x_std,
            y_mean,
            y_std,
        }
    }

    pub fn dim(&self) -> usize {
        self.x_mean.len()
    }

    pub fn standardize(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.x_mean[j], self.x_std[j]);
            col.apply(|v| *v = (*v - m) / s);
        }
        out
    }

    pub fn unstandardize(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.x_mean[j], self.x_std[j]);
            col.apply(|v| *v = *v * s + m);
        }
        out
    }

    pub fn standardize_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.x_mean.iter().zip(&self.x_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn standardize_targets(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.y_mean) / self.y_std).collect()
    }

    pub fn unstandardize_mean(&self, m: f64) -> f64 {
        m * self.y_std + self.y_mean
    }

    pub fn unstandardize_var(&self, v: f64) -> f64 {
        v * self.y_std * self.y_std
    }
}
