//! One-step-ahead prediction, free-run simulation and error metrics.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::preprocess;
use crate::narx::build_regressors;
use crate::train::TrainedModel;
use crate::types::{check_finite, TimeSeriesDataset};

/// Free-run stops once a mean exceeds this many training output deviations.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// Predictions aligned with the source series from index `t0` on.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mean: Vec<f64>,
    /// Latent variance, without the likelihood noise.
    pub variance: Vec<f64>,
    pub t0: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreeRunStatus {
    Completed,
    Diverged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FreeRun {
    pub prediction: Prediction,
    pub status: FreeRunStatus,
}

/// Filters `ds` with the model's cutoff and predicts every target from its
/// measured lags. Outputs are in original units.
pub fn predict_onestep(model: &TrainedModel, ds: &TimeSeriesDataset) -> Result<Prediction> {
    let (y_hat, u_hat) = preprocess(ds, &model.psi.omega)?;
    let set = build_regressors(&y_hat, &u_hat, &ds.y, &model.order)?;
    let (mean, variance) = model.predictor.predict_batch(&set.x, false)?;
    Ok(Prediction {
        mean,
        variance,
        t0: set.t0,
    })
}

/// Simulates the model driven by `u` alone.
///
/// `y_init` holds the first outputs of the run and must cover the longest
/// lag window. Every later output slot is filled with the predicted mean,
/// unfiltered, and the input lags come from the filtered input. Variances
/// are per-step conditional; nothing is propagated through the lags.
pub fn simulate_freerun(model: &TrainedModel, u: &[f64], y_init: &[f64]) -> Result<FreeRun> {
    check_finite("u", u)?;
    check_finite("y_init", y_init)?;
    let order = &model.order;
    let start = y_init.len();
    if start < order.first_target() {
        return Err(Error::DimError {
            expected: order.first_target(),
            got: start,
        });
    }
    if start > u.len() {
        return Err(Error::LengthMismatch {
            what: "initial outputs longer than input",
            left: start,
            right: u.len(),
        });
    }
    let ds = TimeSeriesDataset::new(u.to_vec(), vec![0.0; u.len()], 1.0)?;
    let (_, u_hat) = preprocess(&ds, &model.psi.omega)?;

    let limit = DIVERGENCE_FACTOR * model.meta.output_std;
    let mut y = y_init.to_vec();
    let mut mean = Vec::with_capacity(u.len() - start);
    let mut variance = Vec::with_capacity(u.len() - start);
    let mut row = vec![0.0; order.dim()];
    let mut status = FreeRunStatus::Completed;
    for t in start..u.len() {
        for i in 0..order.na {
            row[i] = y[t - 1 - i];
        }
        for j in 0..order.nb {
            row[order.na + j] = u_hat[t - order.nk - j];
        }
        let (m, v) = model.predictor.predict(&row, false)?;
        if !m.is_finite() || m.abs() > limit {
            status = FreeRunStatus::Diverged;
            break;
        }
        y.push(m);
        mean.push(m);
        variance.push(v);
    }
    Ok(FreeRun {
        prediction: Prediction {
            mean,
            variance,
            t0: start,
        },
        status,
    })
}

fn check_lengths(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { what, left: a, right: b });
    }
    if a == 0 {
        return Err(Error::InvalidParams("metrics need at least one sample".into()));
    }
    Ok(())
}

pub fn rmse(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    check_lengths("predicted vs actual", predicted.len(), actual.len())?;
    let sse: f64 = predicted.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((sse / predicted.len() as f64).sqrt())
}

/// Mean Gaussian negative log density of `actual` under
/// `N(mean, variance + noise_var)`.
pub fn nll(means: &[f64], variances: &[f64], actual: &[f64], noise_var: f64) -> Result<f64> {
    check_lengths("means vs actual", means.len(), actual.len())?;
    check_lengths("variances vs actual", variances.len(), actual.len())?;
    let mut total = 0.0;
    for (i, ((m, v), a)) in means.iter().zip(variances).zip(actual).enumerate() {
        let s2 = v + noise_var;
        if !(s2 > 0.0 && s2.is_finite()) {
            return Err(Error::NonPositiveVariance(s2, i));
        }
        total += 0.5 * ((2.0 * PI * s2).ln() + (a - m) * (a - m) / s2);
    }
    Ok(total / means.len() as f64)
}
