//! Batch command-line front end.
//!
//! Exit codes: 0 success, 1 output or unexpected failure, 2 bad input,
//! 3 training failure, 4 unsupported model file version.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::bench::{self, InputKind, Method, Protocol, SyntheticSystem};
use crate::error::Error;
use crate::persist::{load_model, save_model};
use crate::simulate::{nll, predict_onestep, rmse, simulate_freerun, FreeRunStatus, Prediction};
use crate::train::{fit_gpfnarx, TrainConfig, TrainMode, TrainedModel};
use crate::types::{ModelOrder, PreprocessParams, TimeSeriesDataset};

#[derive(Parser, Debug)]
#[command(name = "gpfnarx", version, about = "Nonlinear system identification with filtered NARX Gaussian processes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on a CSV with columns u and y (t optional).
    Identify(IdentifyArgs),
    /// One-step-ahead predictions from measured lags.
    Predict(PredictArgs),
    /// Free-run simulation driven by the input column only.
    Simulate(SimulateArgs),
    /// Repeated comparison on synthetic systems across noise levels.
    Benchmark(BenchmarkArgs),
    /// Write a synthetic dataset as CSV.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Sod,
    Fitc,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Sod => TrainMode::Sod,
            ModeArg::Fitc => TrainMode::Fitc,
        }
    }
}

#[derive(Args, Debug)]
pub struct IdentifyArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub na: usize,
    #[arg(long, default_value_t = 10)]
    pub nb: usize,
    #[arg(long, default_value_t = 1)]
    pub nk: usize,
    /// Likelihood used while optimizing.
    #[arg(long, value_enum, default_value_t = ModeArg::Sod)]
    pub mode: ModeArg,
    /// Subset size or number of inducing points.
    #[arg(long, default_value_t = 512)]
    pub m: usize,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep the cutoff fixed at this fraction of Nyquist.
    #[arg(long, conflicts_with = "no_filter")]
    pub cutoff: Option<f64>,
    /// Disable pre-filtering (plain GP-NARX).
    #[arg(long)]
    pub no_filter: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV with column u; the first outputs in column y seed the lags (zeros if absent).
    #[arg(long)]
    pub data: PathBuf,
    /// Number of simulated steps after the initial window.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    /// JSON protocol file; flags given explicitly override its fields.
    #[arg(long)]
    pub protocol: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub systems: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub snr: Option<Vec<f64>>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub na: Option<usize>,
    #[arg(long)]
    pub nb: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "bench-out")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, default_value = "cascade")]
    pub system: String,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Output SNR in dB; omit for clean data.
    #[arg(long)]
    pub snr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Benchmark protocol as read from a JSON file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSpec {
    pub systems: Vec<String>,
    pub methods: Vec<String>,
    pub snr_db: Vec<f64>,
    pub repeats: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub na: usize,
    pub nb: usize,
    pub nk: usize,
    pub m: usize,
    pub max_iters: usize,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        let p = Protocol::default();
        Self {
            systems: vec!["cascade".into()],
            methods: p.methods.iter().map(|m| m.name().to_string()).collect(),
            snr_db: p.snr_db,
            repeats: p.repeats,
            n_train: p.n_train,
            n_test: p.n_test,
            na: p.order.na,
            nb: p.order.nb,
            nk: p.order.nk,
            m: p.train.m,
            max_iters: p.train.max_iters,
        }
    }
}

struct Failure {
    code: i32,
    message: String,
}

type Outcome = std::result::Result<(), Failure>;

fn bad_input(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn output_error(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 1,
        message: format!("writing output: {e}"),
    }
}

fn model_error(path: &Path, e: Error) -> Failure {
    let code = match e.root() {
        Error::SchemaVersion { .. } => 4,
        _ => 2,
    };
    Failure {
        code,
        message: format!("{}: {e}", path.display()),
    }
}

/// Runs one command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    configure_threads();
    let outcome = match cli.command {
        Command::Identify(a) => identify(a),
        Command::Predict(a) => predict(a),
        Command::Simulate(a) => simulate(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Generate(a) => generate(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("GPFNARX_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            // fails only if a pool already exists, which is harmless
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn seed_or_draw(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        println!("seed {s}");
        s
    })
}

/// Input table: `u`, optional `y`, optional `t`.
pub struct Table {
    pub t: Option<Vec<f64>>,
    pub u: Vec<f64>,
    pub y: Option<Vec<f64>>,
}

fn column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name))
}

/// Reads a headered CSV. `need_y` makes a missing `y` column an error.
pub fn read_table(path: &Path, need_y: bool) -> std::result::Result<Table, String> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    let headers = reader.headers().map_err(|e| format!("{}: {e}", path.display()))?.clone();
    let iu = column(&headers, "u").ok_or_else(|| format!("{}: missing column `u`", path.display()))?;
    let iy = column(&headers, "y");
    if need_y && iy.is_none() {
        return Err(format!("{}: missing column `y`", path.display()));
    }
    let it = column(&headers, "t");
    let (mut t, mut u, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| format!("{}: {e}", path.display()))?;
        let get = |i: usize, name: &str| -> std::result::Result<f64, String> {
            let field = rec.get(i).unwrap_or("");
            field.parse::<f64>().map_err(|_| {
                format!("{}: row {}: column `{name}` holds `{field}`, not a number", path.display(), row + 2)
            })
        };
        u.push(get(iu, "u")?);
        if let Some(i) = iy {
            y.push(get(i, "y")?);
        }
        if let Some(i) = it {
            t.push(get(i, "t")?);
        }
    }
    if u.is_empty() {
        return Err(format!("{}: no data rows", path.display()));
    }
    Ok(Table {
        t: it.map(|_| t),
        u,
        y: iy.map(|_| y),
    })
}

fn dataset(table: &Table, path: &Path) -> std::result::Result<TimeSeriesDataset, Failure> {
    let y = table.y.clone().unwrap_or_else(|| vec![0.0; table.u.len()]);
    TimeSeriesDataset::new(table.u.clone(), y, 1.0).map_err(|e| bad_input(format!("{}: {e}", path.display())))
}

fn identify(a: IdentifyArgs) -> Outcome {
    let table = read_table(&a.data, true).map_err(bad_input)?;
    let ds = dataset(&table, &a.data)?;
    let order = ModelOrder::new(a.na, a.nb, a.nk).map_err(|e| bad_input(e.to_string()))?;
    let fixed_omega = match a.cutoff {
        Some(c) => Some(PreprocessParams::from_cutoff(c).map_err(|e| bad_input(e.to_string()))?),
        None => None,
    };
    let seed = seed_or_draw(a.seed);
    let mut config = TrainConfig {
        mode: a.mode.into(),
        m: a.m,
        max_iters: a.max_iters,
        seed,
        fixed_omega,
        ..Default::default()
    };
    if a.no_filter {
        config = config.without_filter();
    }
    let model = fit_gpfnarx(&ds, &order, &config).map_err(|e| {
        let code = match &e {
            Error::Stage { stage: "configuration" | "validation", .. } => 2,
            _ => 3,
        };
        Failure {
            code,
            message: format!("training failed at {e}"),
        }
    })?;
    save_model(&model, &a.out).map_err(output_error)?;
    let trace = &model.meta.lml_trace;
    println!(
        "lml {} -> {} over {} iterations ({:?})",
        trace.first().copied().unwrap_or(f64::NAN),
        model.final_lml(),
        model.meta.iterations,
        model.meta.status
    );
    println!("cutoff {}", model.cutoff());
    info!("model written to {}", a.out.display());
    Ok(())
}

fn load(path: &Path) -> std::result::Result<TrainedModel, Failure> {
    load_model(path).map_err(|e| model_error(path, e))
}

fn write_predictions(
    path: &Path,
    times: &[f64],
    actual: Option<&[f64]>,
    p: &Prediction,
    noise_var: f64,
) -> Outcome {
    let file = File::create(path).map_err(output_error)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header = vec!["t"];
    if actual.is_some() {
        header.push("y_actual");
    }
    header.extend(["y_mean", "y_std"]);
    w.write_record(&header).map_err(output_error)?;
    for (i, (m, v)) in p.mean.iter().zip(&p.variance).enumerate() {
        let mut rec = vec![times[p.t0 + i].to_string()];
        if let Some(a) = actual {
            rec.push(a[p.t0 + i].to_string());
        }
        rec.push(m.to_string());
        rec.push((v + noise_var).sqrt().to_string());
        w.write_record(&rec).map_err(output_error)?;
    }
    w.flush().map_err(output_error)?;
    Ok(())
}

fn report(p: &Prediction, actual: &[f64], noise_var: f64) -> Outcome {
    let a = &actual[p.t0..p.t0 + p.mean.len()];
    let r = rmse(&p.mean, a).map_err(|e| bad_input(e.to_string()))?;
    let n = nll(&p.mean, &p.variance, a, noise_var).map_err(|e| bad_input(e.to_string()))?;
    println!("rmse {r}");
    println!("nll {n}");
    Ok(())
}

fn times(table: &Table) -> Vec<f64> {
    table
        .t
        .clone()
        .unwrap_or_else(|| (0..table.u.len()).map(|i| i as f64).collect())
}

fn predict(a: PredictArgs) -> Outcome {
    let model = load(&a.model)?;
    let table = read_table(&a.data, true).map_err(bad_input)?;
    let ds = dataset(&table, &a.data)?;
    let p = predict_onestep(&model, &ds).map_err(|e| bad_input(format!("{}: {e}", a.data.display())))?;
    let noise = model.predictor.noise_var();
    write_predictions(&a.out, &times(&table), Some(&ds.y), &p, noise)?;
    report(&p, &ds.y, noise)
}

fn simulate(a: SimulateArgs) -> Outcome {
    let model = load(&a.model)?;
    let table = read_table(&a.data, false).map_err(bad_input)?;
    let ds = dataset(&table, &a.data)?;
    let t0 = model.order.first_target();
    if ds.len() <= t0 {
        return Err(bad_input(format!(
            "{}: {} samples do not cover the initial window of {t0}",
            a.data.display(),
            ds.len()
        )));
    }
    let end = match a.steps {
        Some(s) if t0 + s > ds.len() => {
            return Err(bad_input(format!(
                "--steps {s} exceeds the {} input samples after the initial window",
                ds.len() - t0
            )))
        }
        Some(s) => t0 + s,
        None => ds.len(),
    };
    let run = simulate_freerun(&model, &ds.u[..end], &ds.y[..t0]).map_err(|e| bad_input(e.to_string()))?;
    if run.status == FreeRunStatus::Diverged {
        eprintln!("warning: simulation diverged after {} steps", run.prediction.mean.len());
    }
    let noise = model.predictor.noise_var();
    let actual = table.y.as_deref();
    write_predictions(&a.out, &times(&table), actual, &run.prediction, noise)?;
    match actual {
        Some(y) if !run.prediction.mean.is_empty() => report(&run.prediction, y, noise),
        _ => Ok(()),
    }
}

fn protocol_from(a: &BenchmarkArgs) -> std::result::Result<Protocol, Failure> {
    let mut spec = match &a.protocol {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| bad_input(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<ProtocolSpec>(&text).map_err(|e| bad_input(format!("{}: {e}", path.display())))?
        }
        None => ProtocolSpec::default(),
    };
    if let Some(v) = &a.systems {
        spec.systems = v.clone();
    }
    if let Some(v) = &a.methods {
        spec.methods = v.clone();
    }
    if let Some(v) = &a.snr {
        spec.snr_db = v.clone();
    }
    macro_rules! take {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { spec.$f = v; } )* };
    }
    take!(repeats, n_train, n_test, na, nb, m, max_iters);

    let systems = spec
        .systems
        .iter()
        .map(|s| SyntheticSystem::by_name(s).map(|sys| (s.clone(), sys)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| bad_input(e.to_string()))?;
    let methods = spec
        .methods
        .iter()
        .map(|m| Method::parse(m))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| bad_input(e.to_string()))?;
    let order = ModelOrder::new(spec.na, spec.nb, spec.nk).map_err(|e| bad_input(e.to_string()))?;
    Ok(Protocol {
        systems,
        snr_db: spec.snr_db,
        methods,
        repeats: spec.repeats,
        n_train: spec.n_train,
        n_test: spec.n_test,
        order,
        input: InputKind::default(),
        train: TrainConfig {
            m: spec.m,
            max_iters: spec.max_iters,
            ..Default::default()
        },
    })
}

fn benchmark(a: BenchmarkArgs) -> Outcome {
    let protocol = protocol_from(&a)?;
    let seed = seed_or_draw(a.seed);
    let records = bench::run_comparison(&protocol, seed).map_err(|e| bad_input(e.to_string()))?;
    let summary = bench::summarize(&records);
    fs::create_dir_all(&a.out_dir).map_err(output_error)?;
    let create = |name: &str| -> std::result::Result<BufWriter<File>, Failure> {
        Ok(BufWriter::new(File::create(a.out_dir.join(name)).map_err(output_error)?))
    };
    bench::write_records_csv(&records, create("results.csv")?).map_err(output_error)?;
    bench::write_series_csv(&summary, create("series.csv")?).map_err(output_error)?;
    let mut js = create("summary.json")?;
    serde_json::to_writer_pretty(&mut js, &summary).map_err(output_error)?;
    js.write_all(b"\n").map_err(output_error)?;
    js.flush().map_err(output_error)?;

    for c in &summary {
        println!(
            "{} {} snr {}: median rmse {} (p10 {}, p90 {}), {} failed",
            c.system, c.method, c.snr_db, c.rmse_onestep.median, c.rmse_onestep.p10, c.rmse_onestep.p90, c.failures
        );
    }
    if records.iter().all(|r| r.error.is_some()) {
        return Err(Failure {
            code: 3,
            message: "every benchmark run failed".into(),
        });
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> Outcome {
    let system = SyntheticSystem::by_name(&a.system).map_err(|e| bad_input(e.to_string()))?;
    let seed = seed_or_draw(a.seed);
    let clean = bench::generate(&system, a.n, InputKind::default(), seed).map_err(|e| bad_input(e.to_string()))?;
    let ds = match a.snr {
        Some(snr) => bench::add_measurement_noise(&clean, snr, seed.wrapping_add(1)).map_err(|e| bad_input(e.to_string()))?,
        None => clean,
    };
    let mut w = csv::Writer::from_path(&a.out).map_err(output_error)?;
    w.write_record(["t", "u", "y"]).map_err(output_error)?;
    for (i, (u, y)) in ds.u.iter().zip(&ds.y).enumerate() {
        w.write_record([i.to_string(), u.to_string(), y.to_string()]).map_err(output_error)?;
    }
    w.flush().map_err(output_error)?;
    Ok(())
}
