//! Joint marginal-likelihood training of the filter cutoff and the GP
//! hyper-parameters, followed by construction of the FITC predictor.
//!
//! The objective at ψ = (ω, θ) runs the whole pipeline: filter both signals,
//! build regressors, standardize, and evaluate the log marginal likelihood.
//! Its θ-gradient is analytic. The ω-gradient is a central finite difference
//! through the same pipeline.

use log::info;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact;
use crate::filter::preprocess;
use crate::fitc::{self, sample_rows, FitcPredictor, InducingSet};
use crate::narx::build_regressors;
use crate::optim::{maximize, OptimConfig, Status};
use crate::types::{
    logit, validate_dataset, FullParams, GpHyperparams, ModelOrder, PreprocessParams, Standardizer,
    TimeSeriesDataset,
};

/// Training treats σ² as at least this fraction of σ_f². Smaller values
/// vanish below the rounding error of the kernel diagonal.
pub const MIN_NOISE_RATIO: f64 = 1e-10;

/// Raises σ to the training noise floor. The flag says whether it moved.
pub fn floor_noise(theta: &GpHyperparams) -> (GpHyperparams, bool) {
    let floor = theta.log_signal_std + 0.5 * MIN_NOISE_RATIO.ln();
    let mut out = theta.clone();
    if theta.log_noise_std < floor {
        out.log_noise_std = floor;
        (out, true)
    } else {
        (out, false)
    }
}

/// Logit cutoff used to switch pre-filtering off.
pub const ALL_PASS_LOGIT: f64 = 30.0;

/// How the marginal likelihood is evaluated during optimization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Exact GP on a random subset of M regressor rows.
    Sod,
    /// FITC on all rows with M inducing rows.
    Fitc,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Subset size (SoD) or number of inducing points (FITC).
    pub m: usize,
    pub max_iters: usize,
    pub gtol: f64,
    /// Relative improvement below which the main ascent stops. Zero disables it.
    pub ftol: f64,
    /// Central difference step for the cutoff logit.
    pub fd_step: f64,
    pub seed: u64,
    /// Freezes ω; with [`ALL_PASS_LOGIT`] this is plain GP-NARX.
    pub fixed_omega: Option<PreprocessParams>,
    /// Iterations of each warm-up block.
    pub init_steps: usize,
    /// Rows used by the warm-up.
    pub init_rows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Sod,
            m: 512,
            max_iters: 200,
            gtol: 1e-5,
            ftol: 0.0,
            fd_step: 1e-4,
            seed: 0,
            fixed_omega: None,
            init_steps: 10,
            init_rows: 256,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidParams("subset / inducing size must be at least 1".into()));
        }
        if self.init_rows == 0 {
            return Err(Error::InvalidParams("warm-up subset must be nonempty".into()));
        }
        if !(self.gtol > 0.0) || !(self.fd_step > 0.0) || !(self.ftol >= 0.0) {
            return Err(Error::InvalidParams("tolerances and steps must be positive".into()));
        }
        if let Some(w) = &self.fixed_omega {
            if !w.logit_cutoff.is_finite() {
                return Err(Error::InvalidParams("fixed cutoff logit must be finite".into()));
            }
        }
        Ok(())
    }

    /// Plain GP-NARX: same settings with the filter disabled.
    pub fn without_filter(mut self) -> Self {
        self.fixed_omega = Some(PreprocessParams {
            logit_cutoff: ALL_PASS_LOGIT,
        });
        self
    }
}

/// Per-purpose seed streams so the subsets do not coincide.
fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_WARMUP: u64 = 1;

/// Regressor scaling fitted on the unfiltered data, so it does not move with ω.
pub fn fit_standardizer(ds: &TimeSeriesDataset, order: &ModelOrder) -> Result<Standardizer> {
    let raw = build_regressors(&ds.y, &ds.u, &ds.y, order)?;
    Ok(Standardizer::fit(&raw.x, &raw.targets))
}

/// Filtered, standardized regressors and standardized targets.
pub fn standardized_regressors(
    ds: &TimeSeriesDataset,
    order: &ModelOrder,
    omega: &PreprocessParams,
    scaler: &Standardizer,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (y_hat, u_hat) = preprocess(ds, omega)?;
    let set = build_regressors(&y_hat, &u_hat, &ds.y, order)?;
    Ok((scaler.standardize(&set.x), scaler.standardize_targets(&set.targets)))
}

#[derive(Clone, Copy, PartialEq)]
enum Block {
    All,
    Theta,
    Omega,
}

/// The pipeline log marginal likelihood on fixed data, subset and scaling.
pub struct Objective<'a> {
    ds: &'a TimeSeriesDataset,
    order: ModelOrder,
    scaler: Standardizer,
    mode: TrainMode,
    /// SoD rows, or the rows whose regressors serve as inducing inputs.
    rows: Vec<usize>,
    fd_step: f64,
}

impl<'a> Objective<'a> {
    pub fn new(ds: &'a TimeSeriesDataset, order: &ModelOrder, config: &TrainConfig) -> Result<Self> {
        config.check()?;
        validate_dataset(ds, order)?;
        let scaler = fit_standardizer(ds, order)?;
        let t = order.rows_for(ds.len());
        let rows = sample_rows(t, config.m.min(t), config.seed)?;
        Ok(Self::with_rows(ds, order, scaler, config.mode, rows, config.fd_step))
    }

    fn with_rows(
        ds: &'a TimeSeriesDataset,
        order: &ModelOrder,
        scaler: Standardizer,
        mode: TrainMode,
        rows: Vec<usize>,
        fd_step: f64,
    ) -> Self {
        Self {
            ds,
            order: *order,
            scaler,
            mode,
            rows,
            fd_step,
        }
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn scaler(&self) -> &Standardizer {
        &self.scaler
    }

    fn lml_at(&self, omega: &PreprocessParams, theta: &GpHyperparams, with_grad: bool) -> Result<(f64, Vec<f64>)> {
        let (theta, floored) = floor_noise(theta);
        let mut out = self.lml_at_raw(omega, &theta, with_grad)?;
        if floored && with_grad {
            // σ tracks σ_f on the floor
            let n = out.1.len();
            out.1[n - 2] += out.1[n - 1];
            out.1[n - 1] = 0.0;
        }
        Ok(out)
    }

    fn lml_at_raw(&self, omega: &PreprocessParams, theta: &GpHyperparams, with_grad: bool) -> Result<(f64, Vec<f64>)> {
        let (x, y) = standardized_regressors(self.ds, &self.order, omega, &self.scaler)?;
        match self.mode {
            TrainMode::Sod => {
                let xs = x.select_rows(&self.rows);
                let ys: Vec<f64> = self.rows.iter().map(|&r| y[r]).collect();
                if with_grad {
                    exact::lml_and_grad_strict(&xs, &ys, theta)
                } else {
                    Ok((exact::log_marginal_likelihood_strict(&xs, &ys, theta)?, Vec::new()))
                }
            }
            TrainMode::Fitc => {
                let inducing = InducingSet::from_indices(&x, self.rows.clone(), 0)?;
                if with_grad {
                    fitc::fitc_lml_and_grad(&x, &y, &inducing, theta)
                } else {
                    Ok((fitc::fitc_log_marginal_likelihood(&x, &y, &inducing, theta)?, Vec::new()))
                }
            }
        }
    }

    /// Log marginal likelihood at ψ.
    pub fn value(&self, psi: &FullParams) -> Result<f64> {
        Ok(self.lml_at(&psi.omega, &psi.theta, false)?.0)
    }

    /// Central difference of the pipeline in the cutoff logit.
    pub fn omega_grad(&self, psi: &FullParams, step: f64) -> Result<f64> {
        let shifted = |delta: f64| {
            let omega = PreprocessParams {
                logit_cutoff: psi.omega.logit_cutoff + delta,
            };
            self.lml_at(&omega, &psi.theta, false).map(|r| r.0)
        };
        let (plus, minus) = rayon::join(|| shifted(step), || shifted(-step));
        Ok((plus? - minus?) / (2.0 * step))
    }

    fn evaluate(&self, psi: &FullParams, block: Block) -> Result<(f64, Vec<f64>)> {
        let want_theta = block != Block::Omega;
        let (value, gt) = self.lml_at(&psi.omega, &psi.theta, want_theta)?;
        let go = if block == Block::Theta {
            0.0
        } else {
            self.omega_grad(psi, self.fd_step)?
        };
        let mut grad = Vec::with_capacity(psi.theta.len() + 1);
        grad.push(go);
        if want_theta {
            grad.extend(gt);
        } else {
            grad.resize(psi.theta.len() + 1, 0.0);
        }
        Ok((value, grad))
    }

    /// Value and gradient over `[logit c, log ℓ.., log σ_f, log σ]`.
    pub fn value_and_grad(&self, psi: &FullParams) -> Result<(f64, Vec<f64>)> {
        if psi.theta.dim() != self.order.dim() {
            return Err(Error::DimError {
                expected: self.order.dim(),
                got: psi.theta.dim(),
            });
        }
        self.evaluate(psi, Block::All)
    }
}

/// Pipeline log marginal likelihood and gradient at ψ.
pub fn objective(
    psi: &FullParams,
    ds: &TimeSeriesDataset,
    order: &ModelOrder,
    config: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    Objective::new(ds, order, config)?.value_and_grad(psi)
}

/// Outcome of an ascent run.
#[derive(Clone, Debug)]
pub struct Ascent {
    pub psi: FullParams,
    pub lml: f64,
    pub status: Status,
    pub iterations: usize,
    pub trace: Vec<f64>,
}

fn ascend(obj: &Objective, psi0: &FullParams, block: Block, cfg: &OptimConfig) -> Result<Ascent> {
    if psi0.theta.dim() != obj.order.dim() {
        return Err(Error::DimError {
            expected: obj.order.dim(),
            got: psi0.theta.dim(),
        });
    }
    let full0 = psi0.to_vec();
    let active: Vec<usize> = match block {
        Block::All => (0..full0.len()).collect(),
        Block::Theta => (1..full0.len()).collect(),
        Block::Omega => vec![0],
    };
    let embed = |sub: &[f64]| -> Result<FullParams> {
        let mut v = full0.clone();
        for (&i, s) in active.iter().zip(sub) {
            v[i] = *s;
        }
        FullParams::from_slice(&v)
    };
    let x0: Vec<f64> = active.iter().map(|&i| full0[i]).collect();
    let r = maximize(
        |sub| {
            let (value, grad) = obj.evaluate(&embed(sub)?, block)?;
            Ok((value, active.iter().map(|&i| grad[i]).collect()))
        },
        &x0,
        cfg,
    )?;
    let mut psi = embed(&r.x)?;
    psi.theta = floor_noise(&psi.theta).0;
    Ok(Ascent {
        psi,
        lml: r.value,
        status: r.status,
        iterations: r.iterations,
        trace: r.trace,
    })
}

fn start_point(order: &ModelOrder, config: &TrainConfig) -> FullParams {
    FullParams {
        omega: config.fixed_omega.unwrap_or(PreprocessParams {
            logit_cutoff: logit(0.9),
        }),
        theta: GpHyperparams::isotropic(order.dim(), 1.0, 1.0, 0.1),
    }
}

/// Starting point: the default ψ₀ refined by a few θ-only steps and then a
/// few ω-only steps of exact-GP ascent on a small random subset.
pub fn initial_guess(ds: &TimeSeriesDataset, order: &ModelOrder, config: &TrainConfig) -> Result<FullParams> {
    config.check()?;
    validate_dataset(ds, order)?;
    let scaler = fit_standardizer(ds, order)?;
    let t = order.rows_for(ds.len());
    let rows = sample_rows(t, config.init_rows.min(t), derive_seed(config.seed, STREAM_WARMUP))?;
    let obj = Objective::with_rows(ds, order, scaler, TrainMode::Sod, rows, config.fd_step);
    let cfg = OptimConfig {
        max_iters: config.init_steps,
        gtol: config.gtol,
        ..Default::default()
    };
    let mut psi = start_point(order, config);
    psi = ascend(&obj, &psi, Block::Theta, &cfg)?.psi;
    if config.fixed_omega.is_none() {
        psi = ascend(&obj, &psi, Block::Omega, &cfg)?.psi;
    }
    Ok(psi)
}

fn main_block(config: &TrainConfig) -> Block {
    if config.fixed_omega.is_some() {
        Block::Theta
    } else {
        Block::All
    }
}

fn main_optim(config: &TrainConfig) -> OptimConfig {
    OptimConfig {
        max_iters: config.max_iters,
        gtol: config.gtol,
        ftol: config.ftol,
        ..Default::default()
    }
}

/// Quasi-Newton ascent of the pipeline likelihood from `psi0`.
///
/// Returns the best point visited; only a failure at `psi0` itself is an error.
pub fn maximize_marginal_likelihood(
    psi0: &FullParams,
    ds: &TimeSeriesDataset,
    order: &ModelOrder,
    config: &TrainConfig,
) -> Result<Ascent> {
    let obj = Objective::new(ds, order, config)?;
    ascend(&obj, psi0, main_block(config), &main_optim(config))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub mode: TrainMode,
    pub seed: u64,
    pub status: Status,
    pub iterations: usize,
    /// Accepted-step log marginal likelihoods of the main ascent.
    pub lml_trace: Vec<f64>,
    /// Deviation of the training output, in output units.
    pub output_std: f64,
    pub train_rows: usize,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub psi: FullParams,
    pub order: ModelOrder,
    pub scaler: Standardizer,
    /// Inducing inputs in standardized regressor units.
    pub inducing: InducingSet,
    pub predictor: FitcPredictor,
    pub meta: TrainingMeta,
}

impl TrainedModel {
    pub fn cutoff(&self) -> f64 {
        self.psi.omega.cutoff()
    }

    pub fn final_lml(&self) -> f64 {
        self.meta.lml_trace.last().copied().unwrap_or(f64::NAN)
    }

    /// Recomputes the predictor caches from `ds` and returns the largest
    /// absolute difference to the stored ones.
    pub fn cache_discrepancy(&self, ds: &TimeSeriesDataset) -> Result<f64> {
        let rebuilt = fitc_on_full_data(ds, &self.order, &self.psi, &self.scaler, &self.inducing.indices, self.inducing.seed)?.1;
        let mut worst: f64 = 0.0;
        for (a, b) in [
            (&rebuilt.chol_km, &self.predictor.chol_km),
            (&rebuilt.chol_a, &self.predictor.chol_a),
            (&rebuilt.xbar, &self.predictor.xbar),
        ] {
            worst = worst.max((a - b).amax());
        }
        Ok(worst.max((&rebuilt.mean_weights - &self.predictor.mean_weights).amax()))
    }

    /// The same model predicting with the exact GP on the training subset
    /// instead of FITC on all rows.
    pub fn subset_of_data(&self, ds: &TimeSeriesDataset) -> Result<TrainedModel> {
        let (x, y) = standardized_regressors(ds, &self.order, &self.psi.omega, &self.scaler)?;
        let rows = &self.inducing.indices;
        let xs = x.select_rows(rows);
        let ys: Vec<f64> = rows.iter().map(|&r| y[r]).collect();
        let all: Vec<usize> = (0..rows.len()).collect();
        let inducing = InducingSet::from_indices(&xs, all, self.inducing.seed)?;
        let predictor = fitc::fitc_precompute(&xs, &ys, &inducing, &self.psi.theta)?.with_scaler(self.scaler.clone());
        Ok(TrainedModel {
            inducing: InducingSet {
                xbar: predictor.xbar.clone(),
                indices: rows.clone(),
                seed: self.inducing.seed,
            },
            predictor,
            ..self.clone()
        })
    }
}

fn fitc_on_full_data(
    ds: &TimeSeriesDataset,
    order: &ModelOrder,
    psi: &FullParams,
    scaler: &Standardizer,
    rows: &[usize],
    seed: u64,
) -> Result<(InducingSet, FitcPredictor)> {
    let (x, y) = standardized_regressors(ds, order, &psi.omega, scaler)?;
    let inducing = InducingSet::from_indices(&x, rows.to_vec(), seed)?;
    let predictor = fitc::fitc_precompute(&x, &y, &inducing, &psi.theta)?.with_scaler(scaler.clone());
    Ok((inducing, predictor))
}

/// Initial guess, joint ascent, then a FITC predictor over the whole dataset.
pub fn fit_gpfnarx(ds: &TimeSeriesDataset, order: &ModelOrder, config: &TrainConfig) -> Result<TrainedModel> {
    config.check().map_err(|e| e.at_stage("configuration"))?;
    validate_dataset(ds, order).map_err(|e| e.at_stage("validation"))?;
    let psi0 = initial_guess(ds, order, config).map_err(|e| e.at_stage("initial guess"))?;
    let obj = Objective::new(ds, order, config).map_err(|e| e.at_stage("optimization"))?;
    let ascent = ascend(&obj, &psi0, main_block(config), &main_optim(config)).map_err(|e| e.at_stage("optimization"))?;
    info!(
        "optimization {:?} after {} iterations: lml {:.4}, cutoff {:.4}",
        ascent.status,
        ascent.iterations,
        ascent.lml,
        ascent.psi.omega.cutoff()
    );
    let (inducing, predictor) = fitc_on_full_data(ds, order, &ascent.psi, obj.scaler(), obj.rows(), config.seed)
        .map_err(|e| e.at_stage("predictor"))?;
    Ok(TrainedModel {
        meta: TrainingMeta {
            mode: config.mode,
            seed: config.seed,
            status: ascent.status,
            iterations: ascent.iterations,
            lml_trace: ascent.trace,
            output_std: obj.scaler().y_std,
            train_rows: order.rows_for(ds.len()),
        },
        psi: ascent.psi,
        order: *order,
        scaler: obj.scaler().clone(),
        inducing,
        predictor,
    })
}
