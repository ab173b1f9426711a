//! Zero-phase second-order Butterworth low-pass pre-filtering.
//!
//! The cutoff `c` is normalized to the Nyquist frequency. Coefficients come
//! from the analog prototype through the bilinear transform with pre-warping,
//! so they are smooth in `c` and the half-power point lands exactly on `c`.

use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};
use crate::types::{check_finite, PreprocessParams, TimeSeriesDataset};

/// Samples of odd reflection added at each end: three times the filter order.
pub const EDGE_PAD: usize = 6;

/// Biquad `H(z) = (b0 + b1 z⁻¹ + b2 z⁻²) / (1 + a1 z⁻¹ + a2 z⁻²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiquadCoeffs {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl BiquadCoeffs {
    pub fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    pub fn nyquist_gain(&self) -> f64 {
        (self.b0 - self.b1 + self.b2) / (1.0 - self.a1 + self.a2)
    }

    /// |H(e^{jω})| for ω in radians per sample.
    pub fn magnitude(&self, omega: f64) -> f64 {
        let (c1, s1) = (omega.cos(), omega.sin());
        let (c2, s2) = ((2.0 * omega).cos(), (2.0 * omega).sin());
        let num_re = self.b0 + self.b1 * c1 + self.b2 * c2;
        let num_im = -(self.b1 * s1 + self.b2 * s2);
        let den_re = 1.0 + self.a1 * c1 + self.a2 * c2;
        let den_im = -(self.a1 * s1 + self.a2 * s2);
        (num_re.hypot(num_im)) / (den_re.hypot(den_im))
    }

    /// Both poles strictly inside the unit circle (Jury conditions for a monic quadratic).
    pub fn is_stable(&self) -> bool {
        self.a2.abs() < 1.0 && self.a1.abs() < 1.0 + self.a2
    }

    /// Direct-form II transposed state that holds a constant input `v` at steady state.
    fn steady_state(&self, v: f64) -> [f64; 2] {
        let gain = self.dc_gain();
        let out = gain * v;
        let z2 = self.b2 * v - self.a2 * out;
        let z1 = self.b1 * v - self.a1 * out + z2;
        [z1, z2]
    }

    /// Causal filtering, starting from the steady state of the first sample.
    pub fn lfilter(&self, x: &[f64]) -> Vec<f64> {
        let Some(&first) = x.first() else {
            return Vec::new();
        };
        let [mut z1, mut z2] = self.steady_state(first);
        x.iter()
            .map(|&v| {
                let out = self.b0 * v + z1;
                z1 = self.b1 * v - self.a1 * out + z2;
                z2 = self.b2 * v - self.a2 * out;
                out
            })
            .collect()
    }
}

/// Second-order Butterworth low-pass at normalized cutoff `c ∈ (0, 1)`.
pub fn butterworth2_lowpass(c: f64) -> Result<BiquadCoeffs> {
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::InvalidCutoff(c));
    }
    let k = (0.5 * PI * c).tan();
    let k2 = k * k;
    let norm = 1.0 / (1.0 + SQRT_2 * k + k2);
    let b0 = k2 * norm;
    Ok(BiquadCoeffs {
        b0,
        b1: 2.0 * b0,
        b2: b0,
        a1: 2.0 * (k2 - 1.0) * norm,
        a2: (1.0 - SQRT_2 * k + k2) * norm,
    })
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let (first, last) = (x[0], x[n - 1]);
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
    out.extend_from_slice(x);
    out.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));
    out
}

fn forward_backward(coeffs: &BiquadCoeffs, x: &[f64]) -> Vec<f64> {
    let mut fwd = coeffs.lfilter(x);
    fwd.reverse();
    let mut out = coeffs.lfilter(&fwd);
    out.reverse();
    out
}

/// Zero-phase filtering: the biquad is run forward and backward over an
/// odd-reflection padded copy of the signal.
///
/// The result is the mean of the forward-backward and backward-forward
/// passes, which makes the operator commute exactly with time reversal;
/// away from the edges the two passes coincide.
pub fn filtfilt(signal: &[f64], coeffs: &BiquadCoeffs) -> Result<Vec<f64>> {
    check_finite("signal", signal)?;
    let n = signal.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let pad = EDGE_PAD.min(n - 1);
    let padded = reflect_pad(signal, pad);
    let fb = forward_backward(coeffs, &padded);
    let mut reversed = padded;
    reversed.reverse();
    let bf = forward_backward(coeffs, &reversed);
    Ok((0..n)
        .map(|i| {
            let j = i + pad;
            0.5 * (fb[j] + bf[bf.len() - 1 - j])
        })
        .collect())
}

/// Filters both channels at the cutoff encoded in `omega`.
///
/// Returns `(ŷ, û)`. When the cutoff rounds to the Nyquist frequency the
/// signals pass through unchanged, which is the limit of the filter.
pub fn preprocess(ds: &TimeSeriesDataset, omega: &PreprocessParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = omega.cutoff();
    if c >= 1.0 {
        return Ok((ds.y.clone(), ds.u.clone()));
    }
    let coeffs = butterworth2_lowpass(c)?;
    Ok((filtfilt(&ds.y, &coeffs)?, filtfilt(&ds.u, &coeffs)?))
}
