//! Acceptance suite. Runs every criterion, prints one line per criterion and
//! exits non-zero if any fails.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use gpfnarx::bench::{
    add_measurement_noise, generate, median_rmse, run_comparison, summarize, InputKind, Method, Protocol,
    SyntheticSystem,
};
use gpfnarx::exact::{fit_exact, lml_and_grad, log_marginal_likelihood};
use gpfnarx::filter::{butterworth2_lowpass, filtfilt};
use gpfnarx::fitc::{fitc_lml_and_grad, fitc_log_marginal_likelihood, fitc_precompute, sample_rows, InducingSet};
use gpfnarx::narx::build_regressors;
use gpfnarx::persist::{from_json, to_json};
use gpfnarx::simulate::{predict_onestep, rmse};
use gpfnarx::train::{fit_gpfnarx, TrainConfig, TrainedModel};
use gpfnarx::types::{GpHyperparams, ModelOrder, PreprocessParams, TimeSeriesDataset};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn smooth_targets(x: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..x.nrows())
        .map(|i| {
            let r = x.row(i);
            let s: f64 = r.iter().enumerate().map(|(d, v)| (v * (1.0 + 0.3 * d as f64)).sin()).sum();
            let e: f64 = StandardNormal.sample(rng);
            s + 0.1 * e
        })
        .collect()
}

fn random_theta(d: usize, rng: &mut ChaCha8Rng) -> GpHyperparams {
    GpHyperparams {
        log_lengthscales: (0..d).map(|_| rng.random_range(-0.3..1.0)).collect(),
        log_signal_std: rng.random_range(-0.5..0.5),
        log_noise_std: rng.random_range(-2.5..-0.7),
    }
}

/// Fourth-order central difference of `f` along coordinate `j` of θ.
fn fd_theta(theta: &GpHyperparams, j: usize, f: &dyn Fn(&GpHyperparams) -> f64) -> f64 {
    let h = 1e-3;
    let at = |delta: f64| {
        let mut v = theta.to_vec();
        v[j] += delta;
        f(&GpHyperparams::from_slice(&v).unwrap())
    };
    (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
}

fn worst_relative(analytic: &[f64], theta: &GpHyperparams, f: &dyn Fn(&GpHyperparams) -> f64) -> f64 {
    analytic
        .iter()
        .enumerate()
        .map(|(j, g)| {
            let fd = fd_theta(theta, j, f);
            (g - fd).abs() / fd.abs().max(1.0)
        })
        .fold(0.0, f64::max)
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut exact_worst: f64 = 0.0;
    for _ in 0..50 {
        let t = rng.random_range(5..=50);
        let d = rng.random_range(1..=5);
        let x = gaussian_matrix(t, d, &mut rng);
        let y = smooth_targets(&x, &mut rng);
        let theta = random_theta(d, &mut rng);
        let (_, g) = lml_and_grad(&x, &y, &theta).map_err(|e| e.to_string())?;
        let f = |th: &GpHyperparams| log_marginal_likelihood(&x, &y, th).unwrap();
        exact_worst = exact_worst.max(worst_relative(&g, &theta, &f));
    }
    let mut fitc_worst: f64 = 0.0;
    for _ in 0..30 {
        let t = rng.random_range(20..=60);
        let d = rng.random_range(2..=5);
        let m = rng.random_range(4..=12);
        let x = gaussian_matrix(t, d, &mut rng);
        let y = smooth_targets(&x, &mut rng);
        let theta = random_theta(d, &mut rng);
        let inducing = InducingSet::from_indices(&x, sample_rows(t, m, rng.random()).unwrap(), 0)
            .map_err(|e| e.to_string())?;
        let (_, g) = fitc_lml_and_grad(&x, &y, &inducing, &theta).map_err(|e| e.to_string())?;
        let f = |th: &GpHyperparams| fitc_log_marginal_likelihood(&x, &y, &inducing, th).unwrap();
        fitc_worst = fitc_worst.max(worst_relative(&g, &theta, &f));
    }
    let detail = format!("exact worst {exact_worst:.2e}, fitc worst {fitc_worst:.2e}");
    if exact_worst < 1e-5 && fitc_worst < 1e-4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fitc_degeneracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for (t, d) in [(40, 2), (120, 3), (200, 4)] {
        let x = gaussian_matrix(t, d, &mut rng);
        let y = smooth_targets(&x, &mut rng);
        let theta = GpHyperparams::isotropic(d, 0.8, 1.2, 0.15);
        let inducing = InducingSet::from_indices(&x, (0..t).collect(), 0).map_err(|e| e.to_string())?;
        let a = fitc_log_marginal_likelihood(&x, &y, &inducing, &theta).map_err(|e| e.to_string())?;
        let b = log_marginal_likelihood(&x, &y, &theta).map_err(|e| e.to_string())?;
        worst = worst.max((a - b).abs());
        let pred = fitc_precompute(&x, &y, &inducing, &theta).map_err(|e| e.to_string())?;
        let queries = gaussian_matrix(50, d, &mut rng);
        let ex = fit_exact(&x, &y, &theta)
            .and_then(|f| f.predict(&queries, false))
            .map_err(|e| e.to_string())?;
        let (mean, var) = pred.predict_batch(&queries, false).map_err(|e| e.to_string())?;
        for i in 0..50 {
            worst = worst.max((mean[i] - ex.mean[i]).abs());
            worst = worst.max((var[i] - ex.variance[i]).abs());
        }
    }
    let detail = format!("largest deviation {worst:.2e}");
    if worst < 1e-8 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn exact_sanity() -> Outcome {
    let x = DMatrix::from_column_slice(5, 1, &[-2.0, -0.7, 0.1, 1.3, 2.4]);
    let y = [0.4, -1.1, 0.8, 1.5, -0.3];
    let theta = GpHyperparams::new(&[0.9], 1.3, 1e-5);
    let fit = fit_exact(&x, &y, &theta).map_err(|e| e.to_string())?;
    let at_data = fit.predict(&x, false).map_err(|e| e.to_string())?;
    let interp = (0..5).map(|i| (at_data.mean[i] - y[i]).abs()).fold(0.0, f64::max);
    let far = DMatrix::from_column_slice(3, 1, &[2.4 + 9.0, -2.0 - 12.0, 100.0]);
    let off = fit.predict(&far, false).map_err(|e| e.to_string())?;
    let mut far_dev: f64 = 0.0;
    for i in 0..3 {
        far_dev = far_dev.max(off.mean[i].abs());
        far_dev = far_dev.max((off.variance[i] - theta.signal_var()).abs());
    }
    let detail = format!("interpolation {interp:.2e}, far field {far_dev:.2e}");
    if interp < 1e-6 && far_dev < 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn filter_properties() -> Outcome {
    let mut gain_err: f64 = 0.0;
    let mut half_err: f64 = 0.0;
    for k in 1..20 {
        let c = k as f64 / 20.0;
        let f = butterworth2_lowpass(c).map_err(|e| e.to_string())?;
        gain_err = gain_err.max((f.dc_gain() - 1.0).abs()).max(f.nyquist_gain().abs());
        half_err = half_err.max((f.magnitude(PI * c).powi(2) - 0.5).abs());
    }
    let coeffs = butterworth2_lowpass(0.3).map_err(|e| e.to_string())?;
    let mut peak_ok = true;
    for period in [25.0, 40.0, 64.0] {
        let x: Vec<f64> = (0..1000).map(|t| (2.0 * PI * t as f64 / period).sin()).collect();
        let y = filtfilt(&x, &coeffs).map_err(|e| e.to_string())?;
        let xcorr = |lag: i64| -> f64 {
            (100..900).map(|t| x[t] * y[(t as i64 + lag) as usize]).sum()
        };
        let best = (-8..=8).max_by(|a, b| xcorr(*a).total_cmp(&xcorr(*b))).unwrap();
        peak_ok &= best == 0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x: Vec<f64> = (0..500).map(|_| StandardNormal.sample(&mut rng)).collect();
    let forward = filtfilt(&x, &coeffs).map_err(|e| e.to_string())?;
    let rev: Vec<f64> = x.iter().rev().copied().collect();
    let backward = filtfilt(&rev, &coeffs).map_err(|e| e.to_string())?;
    let sym = forward
        .iter()
        .zip(backward.iter().rev())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let detail = format!(
        "gain {gain_err:.1e}, half-power {half_err:.1e}, lag-0 peak {peak_ok}, reversal {sym:.1e}"
    );
    if gain_err < 1e-9 && half_err < 1e-6 && peak_ok && sym < 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const MASTER_SEED: u64 = 2024;

fn scaled_comparison() -> Outcome {
    let p = Protocol::default();
    let start = Instant::now();
    let records = run_comparison(&p, MASTER_SEED).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let summary = summarize(&records);
    let med = |m: Method, snr: f64| median_rmse(&summary, "cascade", m, snr).unwrap_or(f64::NAN);
    let mut problems = Vec::new();
    let failures = records.iter().filter(|r| r.error.is_some()).count();
    if failures > 0 {
        problems.push(format!("{failures} failed runs"));
    }
    for &snr in &p.snr_db {
        let (fitc, sod) = (med(Method::GpFnarx, snr), med(Method::GpFnarxSod, snr));
        if !(fitc <= 1.1 * sod) {
            problems.push(format!("fitc {fitc:.4} vs sod {sod:.4} at {snr} dB"));
        }
    }
    for snr in [5.0, 10.0] {
        let (f, n) = (med(Method::GpFnarx, snr), med(Method::GpNarx, snr));
        if !(f < n) {
            problems.push(format!("filtered {f:.4} vs unfiltered {n:.4} at {snr} dB"));
        }
    }
    for &m in &p.methods {
        let series: Vec<f64> = p.snr_db.iter().map(|&s| med(m, s)).collect();
        let inversions = series.windows(2).filter(|w| !(w[1] <= w[0])).count();
        if inversions > 1 {
            problems.push(format!("{} has {inversions} inversions", m.name()));
        }
    }
    if secs >= 900.0 {
        problems.push(format!("took {secs:.0} s"));
    }
    let table: Vec<String> = p
        .snr_db
        .iter()
        .map(|&s| {
            format!(
                "{s} dB {:.4}/{:.4}/{:.4}",
                med(Method::GpFnarx, s),
                med(Method::GpFnarxSod, s),
                med(Method::GpNarx, s)
            )
        })
        .collect();
    let mut detail = format!("medians fitc/sod/narx {}", table.join(", "));
    if !problems.is_empty() {
        detail = format!("{detail}; {}", problems.join("; "));
    }
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Largest inverse lengthscale among lags of 5 or more, relative to the
/// overall largest.
fn irrelevant_share(model: &TrainedModel) -> f64 {
    let inv: Vec<f64> = model.psi.theta.lengthscales().iter().map(|l| 1.0 / l).collect();
    let top = inv.iter().copied().fold(0.0, f64::max);
    let na = model.order.na;
    let late_y = inv[..na].iter().skip(4);
    let late_u = inv[na..].iter().skip(4);
    late_y.chain(late_u).copied().fold(0.0, f64::max) / top
}

fn ard_pruning() -> Outcome {
    let order = ModelOrder::new(10, 10, 1).unwrap();
    let mut shares = Vec::new();
    for seed in 0..3u64 {
        let ds = generate(&SyntheticSystem::hammerstein2(), 2000, InputKind::default(), seed)
            .map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            m: 256,
            seed,
            ..Default::default()
        };
        let model = fit_gpfnarx(&ds, &order, &cfg).map_err(|e| e.to_string())?;
        shares.push((irrelevant_share(&model), model.cutoff()));
    }
    let detail = shares
        .iter()
        .enumerate()
        .map(|(s, (r, c))| format!("seed {s}: lag>=5 share {r:.3} at c {c:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    if shares.iter().all(|(r, _)| *r < 0.1) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn noisy_split(seed: u64, snr: f64) -> Result<(TimeSeriesDataset, TimeSeriesDataset), String> {
    let all = generate(&SyntheticSystem::cascade(), 3000, InputKind::default(), seed).map_err(|e| e.to_string())?;
    let noisy = add_measurement_noise(&all.slice(0, 2000), snr, seed + 1000).map_err(|e| e.to_string())?;
    Ok((noisy, all.slice(2000, 3000)))
}

fn onestep_rmse(model: &TrainedModel, test: &TimeSeriesDataset) -> Result<f64, String> {
    let p = predict_onestep(model, test).map_err(|e| e.to_string())?;
    rmse(&p.mean, &test.y[p.t0..]).map_err(|e| e.to_string())
}

fn filter_tuning() -> Outcome {
    let order = ModelOrder::new(10, 10, 1).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in 0..3u64 {
        let (train, test) = noisy_split(seed, 10.0)?;
        let cfg = TrainConfig {
            m: 256,
            seed,
            ..Default::default()
        };
        let tuned = fit_gpfnarx(&train, &order, &cfg).map_err(|e| e.to_string())?;
        let frozen_cfg = TrainConfig {
            fixed_omega: Some(PreprocessParams::from_cutoff(0.9).unwrap()),
            ..cfg
        };
        let frozen = fit_gpfnarx(&train, &order, &frozen_cfg).map_err(|e| e.to_string())?;
        let (a, b) = (onestep_rmse(&tuned, &test)?, onestep_rmse(&frozen, &test)?);
        ok &= tuned.cutoff() < 0.9 && a < b;
        parts.push(format!("seed {seed}: c {:.3}, rmse {a:.4} vs frozen {b:.4}", tuned.cutoff()));
    }
    let detail = parts.join(", ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn determinism() -> Outcome {
    let order = ModelOrder::new(4, 4, 1).unwrap();
    let (train, test) = noisy_split(7, 20.0)?;
    let train = train.slice(0, 600);
    let cfg = TrainConfig {
        m: 100,
        seed: 7,
        ..Default::default()
    };
    let a = fit_gpfnarx(&train, &order, &cfg).map_err(|e| e.to_string())?;
    let b = fit_gpfnarx(&train, &order, &cfg).map_err(|e| e.to_string())?;
    let (ja, jb) = (to_json(&a).map_err(|e| e.to_string())?, to_json(&b).map_err(|e| e.to_string())?);
    let back = from_json(&ja).map_err(|e| e.to_string())?;
    let (p, q) = (
        predict_onestep(&a, &test).map_err(|e| e.to_string())?,
        predict_onestep(&back, &test).map_err(|e| e.to_string())?,
    );
    let dev = p
        .mean
        .iter()
        .zip(&q.mean)
        .chain(p.variance.iter().zip(&q.variance))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let detail = format!("identical files {}, round trip deviation {dev:.1e}", ja == jb);
    if ja == jb && dev <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn complexity() -> Outcome {
    let order = ModelOrder::new(10, 10, 1).unwrap();
    let ds = generate(&SyntheticSystem::cascade(), 20_000 + order.first_target(), InputKind::default(), 9)
        .map_err(|e| e.to_string())?;
    let set = build_regressors(&ds.y, &ds.u, &ds.y, &order).map_err(|e| e.to_string())?;
    let theta = GpHyperparams::isotropic(order.dim(), 3.0, 1.0, 0.1);
    let queries = set.x.rows(0, 5000).into_owned();
    let mut best = Vec::new();
    for m in [128, 512] {
        let inducing = InducingSet::from_indices(&set.x, sample_rows(set.len(), m, 3).unwrap(), 3)
            .map_err(|e| e.to_string())?;
        let pred = fitc_precompute(&set.x, &set.targets, &inducing, &theta).map_err(|e| e.to_string())?;
        let mut times = Vec::new();
        for _ in 0..7 {
            let start = Instant::now();
            let means = pred.predict_mean_batch(&queries).map_err(|e| e.to_string())?;
            times.push(start.elapsed().as_secs_f64());
            std::hint::black_box(means);
        }
        best.push(times.into_iter().fold(f64::INFINITY, f64::min));
    }
    let ratio = best[1] / best[0];
    let detail = format!("M=128 {:.2} ms, M=512 {:.2} ms, ratio {ratio:.2}", best[0] * 1e3, best[1] * 1e3);
    if ratio < 6.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradients),
        ("FITC degeneracy", fitc_degeneracy),
        ("exact GP sanity", exact_sanity),
        ("filter properties", filter_properties),
        ("scaled comparison", scaled_comparison),
        ("ARD pruning", ard_pruning),
        ("filter tuning", filter_tuning),
        ("determinism and serialization", determinism),
        ("prediction complexity", complexity),
    ];
    let limits = [Some(30.0), Some(10.0), None, None, None, None, None, None, None];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, ((name, run), limit)) in criteria.iter().zip(limits).enumerate() {
        let n = i + 1;
        if only.is_some_and(|k| k != n) {
            continue;
        }
        let start = Instant::now();
        let mut outcome = run();
        let secs = start.elapsed().as_secs_f64();
        if let (Ok(detail), Some(l)) = (&outcome, limit) {
            if secs >= l {
                outcome = Err(format!("{detail}; over the {l} s budget"));
            }
        }
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS {detail} ({secs:.1} s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL {detail} ({secs:.1} s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
