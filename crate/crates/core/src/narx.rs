//! NARX regressor construction from pre-filtered signals.
//!
//! Column order is fixed: output lags first, newest first, then input lags,
//! newest first. Saved models depend on it.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::types::ModelOrder;

/// Lagged filtered regressors with aligned raw targets.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressorSet {
    /// T×D, one row per target.
    pub x: DMatrix<f64>,
    pub targets: Vec<f64>,
    /// Index in the source series of the first target.
    pub t0: usize,
}

impl RegressorSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Keeps only the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> (DMatrix<f64>, Vec<f64>) {
        let x = self.x.select_rows(rows);
        let y = rows.iter().map(|&r| self.targets[r]).collect();
        (x, y)
    }
}

fn fill_row(out: &mut [f64], y_hat: &[f64], u_hat: &[f64], t: usize, order: &ModelOrder) {
    for i in 0..order.na {
        out[i] = y_hat[t - 1 - i];
    }
    for j in 0..order.nb {
        out[order.na + j] = u_hat[t - order.nk - j];
    }
}

/// Builds the regressor matrix from filtered `y_hat`, `u_hat` and the
/// unfiltered targets `y_raw`.
pub fn build_regressors(
    y_hat: &[f64],
    u_hat: &[f64],
    y_raw: &[f64],
    order: &ModelOrder,
) -> Result<RegressorSet> {
    order.check()?;
    let n = y_raw.len();
    for (what, len) in [("filtered output", y_hat.len()), ("filtered input", u_hat.len())] {
        if len != n {
            return Err(Error::LengthMismatch {
                what,
                left: len,
                right: n,
            });
        }
    }
    let t0 = order.first_target();
    let rows = order.rows_for(n);
    if rows == 0 {
        return Err(Error::TooShortForOrder {
            len: n,
            required: t0,
        });
    }
    let d = order.dim();
    let mut row = vec![0.0; d];
    let mut x = DMatrix::zeros(rows, d);
    for r in 0..rows {
        fill_row(&mut row, y_hat, u_hat, t0 + r, order);
        for (c, v) in row.iter().enumerate() {
            x[(r, c)] = *v;
        }
    }
    Ok(RegressorSet {
        x,
        targets: y_raw[t0..].to_vec(),
        t0,
    })
}

/// Assembles one query row from the most recent lags, newest first.
pub fn build_query_row(recent_y_hat: &[f64], recent_u_hat: &[f64], order: &ModelOrder) -> Result<Vec<f64>> {
    if recent_y_hat.len() != order.na {
        return Err(Error::DimError {
            expected: order.na,
            got: recent_y_hat.len(),
        });
    }
    if recent_u_hat.len() != order.nb {
        return Err(Error::DimError {
            expected: order.nb,
            got: recent_u_hat.len(),
        });
    }
    let mut row = Vec::with_capacity(order.dim());
    row.extend_from_slice(recent_y_hat);
    row.extend_from_slice(recent_u_hat);
    Ok(row)
}
