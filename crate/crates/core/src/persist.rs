//! Versioned JSON model files.
//!
//! Scalars are plain JSON numbers (written with round-trip precision).
//! Matrices and vectors are base64 strings of little-endian f64 values,
//! matrices in column-major order.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitc::{FitcPredictor, InducingSet};
use crate::train::{TrainedModel, TrainingMeta};
use crate::types::{FullParams, GpHyperparams, ModelOrder, PreprocessParams, Standardizer};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Packed {
    rows: usize,
    cols: usize,
    data: String,
}

fn pack_slice(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn unpack_slice(s: &str, expected: usize, what: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::MalformedModel(format!("{what}: {e}")))?;
    if bytes.len() != 8 * expected {
        return Err(Error::MalformedModel(format!(
            "{what}: expected {expected} values, found {} bytes",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn pack(m: &DMatrix<f64>) -> Packed {
    Packed {
        rows: m.nrows(),
        cols: m.ncols(),
        data: pack_slice(m.as_slice()),
    }
}

fn unpack(p: &Packed, what: &str) -> Result<DMatrix<f64>> {
    let data = unpack_slice(&p.data, p.rows * p.cols, what)?;
    Ok(DMatrix::from_vec(p.rows, p.cols, data))
}

#[derive(Serialize, Deserialize)]
struct Psi {
    logit_cutoff: f64,
    log_lengthscales: Vec<f64>,
    log_signal_std: f64,
    log_noise_std: f64,
}

#[derive(Serialize, Deserialize)]
struct Inducing {
    indices: Vec<usize>,
    seed: u64,
    xbar: Packed,
}

#[derive(Serialize, Deserialize)]
struct Caches {
    chol_km: Packed,
    chol_a: Packed,
    mean_weights: String,
    jitter: f64,
    lambda_min: f64,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    order: ModelOrder,
    psi: Psi,
    standardizer: Standardizer,
    inducing: Inducing,
    predictor: Caches,
    meta: TrainingMeta,
}

pub fn to_json(model: &TrainedModel) -> Result<String> {
    let p = &model.predictor;
    let file = ModelFile {
        schema_version: SCHEMA_VERSION,
        order: model.order,
        psi: Psi {
            logit_cutoff: model.psi.omega.logit_cutoff,
            log_lengthscales: model.psi.theta.log_lengthscales.clone(),
            log_signal_std: model.psi.theta.log_signal_std,
            log_noise_std: model.psi.theta.log_noise_std,
        },
        standardizer: model.scaler.clone(),
        inducing: Inducing {
            indices: model.inducing.indices.clone(),
            seed: model.inducing.seed,
            xbar: pack(&model.inducing.xbar),
        },
        predictor: Caches {
            chol_km: pack(&p.chol_km),
            chol_a: pack(&p.chol_a),
            mean_weights: pack_slice(p.mean_weights.as_slice()),
            jitter: p.jitter,
            lambda_min: p.lambda_min,
        },
        meta: model.meta.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file)?;
    s.push('\n');
    Ok(s)
}

pub fn from_json(text: &str) -> Result<TrainedModel> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::MalformedModel("missing schema_version".into()))?;
    if found != u64::from(SCHEMA_VERSION) {
        return Err(Error::SchemaVersion {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: SCHEMA_VERSION,
        });
    }
    let file: ModelFile = serde_json::from_value(value)?;
    file.order.check()?;
    let theta = GpHyperparams {
        log_lengthscales: file.psi.log_lengthscales,
        log_signal_std: file.psi.log_signal_std,
        log_noise_std: file.psi.log_noise_std,
    };
    if theta.dim() != file.order.dim() {
        return Err(Error::MalformedModel(format!(
            "{} lengthscales for a {}-dimensional model",
            theta.dim(),
            file.order.dim()
        )));
    }
    let psi = FullParams {
        omega: PreprocessParams {
            logit_cutoff: file.psi.logit_cutoff,
        },
        theta: theta.clone(),
    };
    let xbar = unpack(&file.inducing.xbar, "inducing inputs")?;
    if xbar.ncols() != theta.dim() || xbar.nrows() != file.inducing.indices.len() {
        return Err(Error::MalformedModel("inducing inputs have the wrong shape".into()));
    }
    let m = xbar.nrows();
    let mut predictor = FitcPredictor::from_parts(
        xbar.clone(),
        theta,
        unpack(&file.predictor.chol_km, "K_M factor")?,
        unpack(&file.predictor.chol_a, "A factor")?,
        DVector::from_vec(unpack_slice(&file.predictor.mean_weights, m, "mean weights")?),
        file.standardizer.clone(),
    )?;
    predictor.jitter = file.predictor.jitter;
    predictor.lambda_min = file.predictor.lambda_min;
    Ok(TrainedModel {
        psi,
        order: file.order,
        scaler: file.standardizer,
        inducing: InducingSet {
            xbar,
            indices: file.inducing.indices,
            seed: file.inducing.seed,
        },
        predictor,
        meta: file.meta,
    })
}

pub fn save_model(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_json(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedModel> {
    from_json(&fs::read_to_string(path)?)
}
