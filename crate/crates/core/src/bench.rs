//! Synthetic block-structured systems and the repeated comparison protocol.
//!
//! Systems are a linear filter, a static nonlinearity and a second linear
//! filter in cascade, driven by a band-limited input. Models are trained on
//! a noisy split and scored against a clean held-out continuation of the
//! same trajectory.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{butterworth2_lowpass, BiquadCoeffs};
use crate::simulate::{nll, predict_onestep, rmse, simulate_freerun, FreeRunStatus};
use crate::train::{fit_gpfnarx, TrainConfig, TrainedModel};
use crate::types::{ModelOrder, TimeSeriesDataset};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Nonlinearity {
    Identity,
    /// `s·tanh(v/s)`
    Tanh,
    /// `v + s·v³`
    Cubic,
    /// Zero on `|v| ≤ s`, shifted linear outside.
    Deadzone,
}

impl Nonlinearity {
    pub fn apply(self, v: f64, scale: f64) -> f64 {
        match self {
            Nonlinearity::Identity => v,
            Nonlinearity::Tanh => scale * (v / scale).tanh(),
            Nonlinearity::Cubic => v + scale * v * v * v,
            Nonlinearity::Deadzone => v.signum() * (v.abs() - scale).max(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSystem {
    pub front: BiquadCoeffs,
    pub nonlinearity: Nonlinearity,
    pub scale: f64,
    pub back: BiquadCoeffs,
    /// Deviation of white noise entering the back filter.
    pub process_noise: f64,
}

/// Two-pole resonator `g·z⁻¹ / (1 - 2r cos φ z⁻¹ + r² z⁻²)` with unit DC gain.
pub fn delayed_resonator(r: f64, phi: f64) -> BiquadCoeffs {
    let a1 = -2.0 * r * phi.cos();
    let a2 = r * r;
    BiquadCoeffs {
        b0: 0.0,
        b1: 1.0 + a1 + a2,
        b2: 0.0,
        a1,
        a2,
    }
}

const PASS_THROUGH: BiquadCoeffs = BiquadCoeffs {
    b0: 1.0,
    b1: 0.0,
    b2: 0.0,
    a1: 0.0,
    a2: 0.0,
};

impl SyntheticSystem {
    /// Wiener–Hammerstein-style cascade: low-pass, saturation, resonant low-pass.
    pub fn cascade() -> Self {
        Self {
            front: butterworth2_lowpass(0.25).expect("valid cutoff"),
            nonlinearity: Nonlinearity::Tanh,
            scale: 0.5,
            back: delayed_resonator(0.85, 0.3),
            process_noise: 0.0,
        }
    }

    /// Second-order Hammerstein system `y_t = g·tanh(u_{t-1}) - a1 y_{t-1} - a2 y_{t-2}`.
    pub fn hammerstein2() -> Self {
        Self {
            front: PASS_THROUGH,
            nonlinearity: Nonlinearity::Tanh,
            scale: 1.0,
            back: delayed_resonator(0.8, 0.4),
            process_noise: 0.0,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "cascade" => Ok(Self::cascade()),
            "hammerstein2" => Ok(Self::hammerstein2()),
            other => Err(Error::InvalidSystem(format!("unknown system `{other}`"))),
        }
    }

    pub fn check(&self) -> Result<()> {
        if !self.front.is_stable() {
            return Err(Error::InvalidSystem("front filter is unstable".into()));
        }
        if !self.back.is_stable() {
            return Err(Error::InvalidSystem("back filter is unstable".into()));
        }
        let scale_ok = match self.nonlinearity {
            Nonlinearity::Identity => true,
            Nonlinearity::Tanh => self.scale > 0.0,
            Nonlinearity::Cubic | Nonlinearity::Deadzone => self.scale >= 0.0,
        };
        if !scale_ok || !self.scale.is_finite() {
            return Err(Error::InvalidSystem(format!("bad nonlinearity scale {}", self.scale)));
        }
        if !(self.process_noise >= 0.0 && self.process_noise.is_finite()) {
            return Err(Error::InvalidSystem("process noise must be a finite deviation".into()));
        }
        Ok(())
    }
}

/// Causal filtering from rest.
fn run_from_rest(c: &BiquadCoeffs, x: &[f64]) -> Vec<f64> {
    let (mut z1, mut z2) = (0.0, 0.0);
    x.iter()
        .map(|&v| {
            let out = c.b0 * v + z1;
            z1 = c.b1 * v - c.a1 * out + z2;
            z2 = c.b2 * v - c.a2 * out;
            out
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum InputKind {
    /// Random-phase sum of equally spaced sines up to `bandwidth` (fraction of Nyquist).
    Multisine { bandwidth: f64, lines: usize },
    /// White Gaussian noise through a Butterworth low-pass at `bandwidth`.
    FilteredNoise { bandwidth: f64 },
}

impl Default for InputKind {
    fn default() -> Self {
        InputKind::FilteredNoise { bandwidth: 0.3 }
    }
}

/// Unit-deviation excitation of length `n`.
pub fn input_signal(kind: InputKind, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let mut u: Vec<f64> = match kind {
        InputKind::Multisine { bandwidth, lines } => {
            if !(bandwidth > 0.0 && bandwidth <= 1.0) || lines == 0 {
                return Err(Error::InvalidParams("multisine needs bandwidth in (0, 1] and lines ≥ 1".into()));
            }
            let phases: Vec<f64> = (0..lines).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            let step = bandwidth * PI / lines as f64;
            (0..n)
                .map(|t| {
                    phases
                        .iter()
                        .enumerate()
                        .map(|(k, p)| (step * (k + 1) as f64 * t as f64 + p).cos())
                        .sum()
                })
                .collect()
        }
        InputKind::FilteredNoise { bandwidth } => {
            let c = butterworth2_lowpass(bandwidth)?;
            let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            run_from_rest(&c, &white)
        }
    };
    let m = u.iter().sum::<f64>() / n.max(1) as f64;
    let sd = (u.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n.max(1) as f64).sqrt();
    if sd > 0.0 {
        u.iter_mut().for_each(|v| *v /= sd);
    }
    Ok(u)
}

/// Response of `system` to the input `u`, from rest, with process noise drawn from `rng`.
pub fn respond(system: &SyntheticSystem, u: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    system.check()?;
    let mut v: Vec<f64> = run_from_rest(&system.front, u)
        .into_iter()
        .map(|x| system.nonlinearity.apply(x, system.scale))
        .collect();
    if system.process_noise > 0.0 {
        let noise = Normal::new(0.0, system.process_noise).map_err(|e| Error::InvalidSystem(e.to_string()))?;
        v.iter_mut().for_each(|x| *x += noise.sample(rng));
    }
    Ok(run_from_rest(&system.back, &v))
}

/// Simulates `n` samples of the system under a seeded excitation.
pub fn generate(system: &SyntheticSystem, n: usize, input: InputKind, seed: u64) -> Result<TimeSeriesDataset> {
    if n == 0 {
        return Err(Error::InvalidParams("need at least one sample".into()));
    }
    system.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = input_signal(input, n, &mut rng)?;
    let y = respond(system, &u, &mut rng)?;
    TimeSeriesDataset::new(u, y, 1.0)
}

/// Adds white Gaussian noise to the output at the given SNR in dB.
/// An infinite SNR returns the data unchanged.
pub fn add_measurement_noise(ds: &TimeSeriesDataset, snr_db: f64, seed: u64) -> Result<TimeSeriesDataset> {
    if snr_db == f64::INFINITY {
        return Ok(ds.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidParams(format!("SNR {snr_db} dB")));
    }
    let n = ds.len() as f64;
    let mean = ds.y.iter().sum::<f64>() / n;
    let var = ds.y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::CannotSetSnr);
    }
    let sd = (var / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = ds
        .y
        .iter()
        .map(|v| v + sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    TimeSeriesDataset::new(ds.u.clone(), y, ds.dt)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Trained cutoff, FITC predictor on all rows.
    GpFnarx,
    /// Trained cutoff, exact GP on the training subset.
    GpFnarxSod,
    /// Filter off, FITC predictor.
    GpNarx,
    /// Filter off, exact GP on the training subset.
    GpNarxSod,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::GpFnarx, Method::GpFnarxSod, Method::GpNarx, Method::GpNarxSod];

    pub fn name(self) -> &'static str {
        match self {
            Method::GpFnarx => "gpfnarx",
            Method::GpFnarxSod => "gpfnarx-sod",
            Method::GpNarx => "gpnarx",
            Method::GpNarxSod => "gpnarx-sod",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParams(format!("unknown method `{s}`")))
    }

    fn filtered(self) -> bool {
        matches!(self, Method::GpFnarx | Method::GpFnarxSod)
    }

    fn sparse(self) -> bool {
        matches!(self, Method::GpFnarx | Method::GpNarx)
    }
}

#[derive(Clone, Debug)]
pub struct Protocol {
    pub systems: Vec<(String, SyntheticSystem)>,
    pub snr_db: Vec<f64>,
    pub methods: Vec<Method>,
    pub repeats: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub order: ModelOrder,
    pub input: InputKind,
    /// Training settings; `seed` and `fixed_omega` are set per run.
    pub train: TrainConfig,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            systems: vec![("cascade".into(), SyntheticSystem::cascade())],
            snr_db: vec![5.0, 10.0, 20.0, 40.0],
            methods: vec![Method::GpFnarx, Method::GpFnarxSod, Method::GpNarx],
            repeats: 10,
            n_train: 2000,
            n_test: 1000,
            order: ModelOrder { na: 10, nb: 10, nk: 1 },
            input: InputKind::default(),
            train: TrainConfig {
                m: 256,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub system: String,
    pub snr_db: f64,
    pub method: String,
    pub repeat: usize,
    pub rmse_onestep: f64,
    /// Infinite when the simulation diverged.
    pub rmse_freerun: f64,
    pub nll: f64,
    pub train_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

/// Seed for data, noise and training of one (system, repeat) pair.
///
/// Every SNR level and method of a pair sees the same clean trajectory and
/// the same noise shape, so the comparisons are paired.
pub fn cell_seed(master: u64, system: usize, repeat: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((system as u64) << 32) | repeat as u64);
    rng.random()
}

struct Split {
    train_clean: TimeSeriesDataset,
    test: TimeSeriesDataset,
}

fn split(system: &SyntheticSystem, p: &Protocol, seed: u64) -> Result<Split> {
    let all = generate(system, p.n_train + p.n_test, p.input, seed)?;
    Ok(Split {
        train_clean: all.slice(0, p.n_train),
        test: all.slice(p.n_train, p.n_train + p.n_test),
    })
}

fn score(model: &TrainedModel, test: &TimeSeriesDataset) -> Result<(f64, f64, f64)> {
    let one = predict_onestep(model, test)?;
    let actual = &test.y[one.t0..];
    let r1 = rmse(&one.mean, actual)?;
    let nl = nll(&one.mean, &one.variance, actual, model.predictor.noise_var())?;
    let t0 = model.order.first_target();
    let free = simulate_freerun(model, &test.u, &test.y[..t0])?;
    let rf = match free.status {
        FreeRunStatus::Completed => rmse(&free.prediction.mean, &test.y[t0..])?,
        FreeRunStatus::Diverged => f64::INFINITY,
    };
    Ok((r1, rf, nl))
}

fn failed(system: &str, snr: f64, method: Method, repeat: usize, err: &Error) -> RunRecord {
    RunRecord {
        system: system.to_string(),
        snr_db: snr,
        method: method.name().into(),
        repeat,
        rmse_onestep: f64::NAN,
        rmse_freerun: f64::NAN,
        nll: f64::NAN,
        train_seconds: f64::NAN,
        error: Some(err.to_string()),
    }
}

/// One (system, SNR, repeat) cell: each filter setting is trained once and
/// shared by its FITC and subset-of-data predictors.
fn run_cell(p: &Protocol, name: &str, system: &SyntheticSystem, snr: f64, repeat: usize, seed: u64) -> Vec<RunRecord> {
    let data = split(system, p, seed).and_then(|s| {
        let noisy = add_measurement_noise(&s.train_clean, snr, seed ^ 0x5eed)?;
        Ok((noisy, s.test))
    });
    let (train, test) = match data {
        Ok(d) => d,
        Err(e) => return p.methods.iter().map(|&m| failed(name, snr, m, repeat, &e)).collect(),
    };
    let mut out = Vec::new();
    for filtered in [true, false] {
        let methods: Vec<Method> = p.methods.iter().copied().filter(|m| m.filtered() == filtered).collect();
        if methods.is_empty() {
            continue;
        }
        let mut cfg = p.train.clone();
        cfg.seed = seed;
        if !filtered {
            cfg = cfg.without_filter();
        }
        let start = Instant::now();
        let trained = fit_gpfnarx(&train, &p.order, &cfg);
        let train_seconds = start.elapsed().as_secs_f64();
        for m in methods {
            let result = trained.as_ref().map_err(|e| Error::InvalidParams(e.to_string())).and_then(|model| {
                if m.sparse() {
                    score(model, &test)
                } else {
                    score(&model.subset_of_data(&train)?, &test)
                }
            });
            out.push(match result {
                Ok((r1, rf, nl)) => RunRecord {
                    system: name.to_string(),
                    snr_db: snr,
                    method: m.name().into(),
                    repeat,
                    rmse_onestep: r1,
                    rmse_freerun: rf,
                    nll: nl,
                    train_seconds,
                    error: None,
                },
                Err(e) => {
                    warn!("{name} snr {snr} {} repeat {repeat}: {e}", m.name());
                    failed(name, snr, m, repeat, &e)
                }
            });
        }
    }
    info!("{name} snr {snr} repeat {repeat} done");
    out
}

/// Runs the full protocol. Cells run in parallel; results do not depend on scheduling.
pub fn run_comparison(p: &Protocol, master_seed: u64) -> Result<Vec<RunRecord>> {
    if p.systems.is_empty() || p.snr_db.is_empty() || p.methods.is_empty() || p.repeats == 0 {
        return Err(Error::InvalidParams("protocol must have systems, SNRs, methods and repeats".into()));
    }
    let cells: Vec<(usize, f64, usize)> = (0..p.systems.len())
        .flat_map(|s| p.snr_db.iter().flat_map(move |&snr| (0..p.repeats).map(move |r| (s, snr, r))))
        .collect();
    let records = cells
        .par_iter()
        .map(|&(s, snr, r)| {
            let (name, system) = &p.systems[s];
            run_cell(p, name, system, snr, r, cell_seed(master_seed, s, r))
        })
        .collect::<Vec<_>>();
    let mut records: Vec<RunRecord> = records.into_iter().flatten().collect();
    let rank = |m: &str| p.methods.iter().position(|x| x.name() == m).unwrap_or(usize::MAX);
    records.sort_by(|a, b| {
        (&a.system, rank(&a.method))
            .cmp(&(&b.system, rank(&b.method)))
            .then(a.snr_db.total_cmp(&b.snr_db))
            .then(a.repeat.cmp(&b.repeat))
    });
    Ok(records)
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    if lo == hi {
        return sorted[lo];
    }
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
}

impl Spread {
    /// Over the non-NaN values; diverged runs count as infinite.
    pub fn of(values: impl Iterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = values.filter(|x| !x.is_nan()).collect();
        v.sort_by(f64::total_cmp);
        Self {
            median: percentile(&v, 0.5),
            p10: percentile(&v, 0.1),
            p90: percentile(&v, 0.9),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub system: String,
    pub snr_db: f64,
    pub method: String,
    pub runs: usize,
    pub failures: usize,
    pub rmse_onestep: Spread,
    pub rmse_freerun: Spread,
    pub nll: Spread,
    pub train_seconds_mean: f64,
    pub train_seconds_std: f64,
}

/// Groups records by (system, method, SNR) in first-seen order.
pub fn summarize(records: &[RunRecord]) -> Vec<CellSummary> {
    let mut keys: Vec<(String, String, u64)> = Vec::new();
    let mut groups: BTreeMap<(String, String, u64), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.system.clone(), r.method.clone(), r.snr_db.to_bits());
        if !groups.contains_key(&key) {
            keys.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    keys.into_iter()
        .map(|key| {
            let rs = &groups[&key];
            let ok: Vec<&&RunRecord> = rs.iter().filter(|r| r.error.is_none()).collect();
            let times: Vec<f64> = ok.iter().map(|r| r.train_seconds).collect();
            let n = times.len().max(1) as f64;
            let mean = times.iter().sum::<f64>() / n;
            let std = (times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n).sqrt();
            CellSummary {
                system: key.0.clone(),
                snr_db: f64::from_bits(key.2),
                method: key.1.clone(),
                runs: rs.len(),
                failures: rs.len() - ok.len(),
                rmse_onestep: Spread::of(ok.iter().map(|r| r.rmse_onestep)),
                rmse_freerun: Spread::of(ok.iter().map(|r| r.rmse_freerun)),
                nll: Spread::of(ok.iter().map(|r| r.nll)),
                train_seconds_mean: mean,
                train_seconds_std: std,
            }
        })
        .collect()
}

/// Median one-step RMSE of a (system, method, SNR) group.
pub fn median_rmse(summary: &[CellSummary], system: &str, method: Method, snr_db: f64) -> Option<f64> {
    summary
        .iter()
        .find(|c| c.system == system && c.method == method.name() && c.snr_db == snr_db)
        .map(|c| c.rmse_onestep.median)
}

pub fn write_records_csv<W: Write>(records: &[RunRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "system",
        "snr_db",
        "method",
        "repeat",
        "rmse_onestep",
        "rmse_freerun",
        "nll",
        "train_seconds",
    ])
    .map_err(csv_error)?;
    for r in records {
        w.write_record([
            r.system.clone(),
            r.snr_db.to_string(),
            r.method.clone(),
            r.repeat.to_string(),
            r.rmse_onestep.to_string(),
            r.rmse_freerun.to_string(),
            r.nll.to_string(),
            r.train_seconds.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// RMSE-vs-SNR series per (system, method), one row per SNR level.
pub fn write_series_csv<W: Write>(summary: &[CellSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "system",
        "method",
        "snr_db",
        "median_rmse_onestep",
        "p10_rmse_onestep",
        "p90_rmse_onestep",
        "median_rmse_freerun",
        "p10_rmse_freerun",
        "p90_rmse_freerun",
    ])
    .map_err(csv_error)?;
    let mut rows: Vec<&CellSummary> = summary.iter().collect();
    rows.sort_by(|a, b| (&a.system, &a.method).cmp(&(&b.system, &b.method)).then(a.snr_db.total_cmp(&b.snr_db)));
    for c in rows {
        w.write_record([
            c.system.clone(),
            c.method.clone(),
            c.snr_db.to_string(),
            c.rmse_onestep.median.to_string(),
            c.rmse_onestep.p10.to_string(),
            c.rmse_onestep.p90.to_string(),
            c.rmse_freerun.median.to_string(),
            c.rmse_freerun.p10.to_string(),
            c.rmse_freerun.p90.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
