//! `conformal` command-line entry point.
//!
//! Errors end the process with a single machine-readable line on stderr,
//! `error: kind=<kind> msg="<message>"`. Usage problems (bad flags, missing
//! input files, invalid configuration) exit with 2, everything else with 1.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use conformal_core::conformal::{
    calibrate_jkplus, calibrate_madsplit, calibrate_split, CalibrationState, PredictionInterval,
};
use conformal_core::data::{load_table, write_dataset, CsvFormat, RiskLevel, Table};
use conformal_core::experiment::{run_bench, ExperimentConfig, KernelChoice, MethodChoice};
use conformal_core::information::{
    finite_sample_alpha, ksg_mutual_information, local_coverage_bound, tune_kernel, TuningParams,
};
use conformal_core::kernels::KernelSpec;
use conformal_core::metrics::{evaluate, format_with_uncertainty};
use conformal_core::synthetic::{generate_1d, Synth1DParams};
use conformal_core::Matrix;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{msg}")]
    Usage { kind: &'static str, msg: String },
    #[error(transparent)]
    Core(#[from] conformal_core::Error),
}

impl CliError {
    fn usage(kind: &'static str, msg: impl Into<String>) -> Self {
        CliError::Usage { kind, msg: msg.into() }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage { kind, .. } => kind,
            CliError::Core(e) => e.kind(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage { .. } => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(std::io::Error::other(e.to_string()).into())
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "conformal", version, about = "Locally rescaled conformal regression toolkit")]
struct Cli {
    /// Raise log verbosity (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a 1D heteroscedastic dataset to CSV.
    Synth(SynthArgs),
    /// Calibrate a conformal method and write its state document.
    Calibrate(CalibrateArgs),
    /// Price intervals for new points from a state document.
    Predict(PredictArgs),
    /// Select per-point RBF length scales by MI minimization.
    TuneKernel(TuneArgs),
    /// KSG mutual information between inputs and scores (or labels).
    Mi(MiArgs),
    /// Adaptivity metrics for a file of intervals.
    Metrics(MetricsArgs),
    /// Run a full benchmark and write report files.
    Bench(BenchArgs),
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let a: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    RiskLevel::new(a).map(f64::from).map_err(|e| e.to_string())
}

fn parse_kernel(s: &str) -> Result<KernelChoice, String> {
    s.parse().map_err(|e: conformal_core::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<MethodChoice, String> {
    s.parse().map_err(|e: conformal_core::Error| e.to_string())
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 13000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON file with generator parameters; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Calibration CSV with `y`, `pred` and optional `emb*` columns.
    #[arg(long)]
    input: PathBuf,
    /// Training CSV with `y` and `pred` columns (madsplit only).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Experiment config supplying alpha, kernel and tuning defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_method, default_value = "jkplus")]
    method: MethodChoice,
    #[arg(long, value_parser = parse_kernel)]
    kernel: Option<KernelChoice>,
    #[arg(long, value_parser = parse_alpha)]
    alpha: Option<f64>,
    /// Tuning seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output state JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    state: PathBuf,
    /// CSV with `pred`, features and optional `emb*` and `y` columns.
    #[arg(long)]
    input: PathBuf,
    /// Re-price at a different risk level.
    #[arg(long, value_parser = parse_alpha)]
    alpha: Option<f64>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TuneArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for `kernel.json` and `mi_vs_scale.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MiArgs {
    /// CSV with features (or `emb*`) and `y`; with a `pred` column the
    /// target is the absolute error.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, value_parser = parse_alpha, default_value_t = 0.05)]
    alpha: f64,
    /// Density-ratio constant of the coverage bound.
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Interval CSV with `y`, `pred` and `half_width` columns.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = parse_alpha, default_value_t = 0.05)]
    alpha: f64,
    /// State document whose largest calibration error replaces infinite
    /// half-widths.
    #[arg(long)]
    state: Option<PathBuf>,
    #[arg(long, conflicts_with = "state")]
    max_cal_error: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_alpha)]
    alpha: Option<f64>,
    #[arg(long)]
    n_cal: Option<usize>,
    #[arg(long)]
    n_reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Methods to run, comma separated.
    #[arg(long, value_parser = parse_method, value_delimiter = ',')]
    method: Vec<MethodChoice>,
    #[arg(long, value_parser = parse_kernel)]
    kernel: Option<KernelChoice>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            if code == 0 {
                let _ = e.print();
                return 0;
            }
            let msg = e.kind().to_string();
            eprintln!("{}", e.render());
            eprintln!("error: kind=usage msg={msg:?}");
            return 2;
        }
    };
    init_logging(cli.verbose);
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: kind={} msg={:?}", e.kind(), e.to_string());
            e.exit_code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Predict(a) => predict(a),
        Command::TuneKernel(a) => tune(a),
        Command::Mi(a) => mi(a),
        Command::Metrics(a) => metrics(a),
        Command::Bench(a) => bench(a),
    }
}

fn existing(path: &Path) -> Result<&Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::usage("missing_file", format!("{}: no such file", path.display())))
    }
}

fn invalid_config(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::usage("invalid_config", format!("{}: {e}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(existing(p)?)?;
            ExperimentConfig::from_json(&text).map_err(|e| invalid_config(p, e))
        }
    }
}

fn read_table(path: &Path, require_labels: bool) -> Result<Table> {
    Ok(load_table(
        existing(path)?,
        CsvFormat {
            require_labels,
            ..CsvFormat::default()
        },
    )?)
}

fn need<'a, T>(v: &'a Option<T>, path: &Path, column: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| {
        CliError::Core(conformal_core::Error::Schema {
            path: path.into(),
            msg: format!("missing `{column}` column"),
        })
    })
}

/// Embeddings if the table has them, raw features otherwise.
fn embeddings(t: &Table) -> &Matrix {
    t.embeddings.as_ref().unwrap_or(&t.features)
}

fn write_json(value: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let params = match &a.config {
        None => Synth1DParams::default(),
        Some(p) => {
            let text = std::fs::read_to_string(existing(p)?)?;
            let params: Synth1DParams = serde_json::from_str(&text).map_err(|e| invalid_config(p, e))?;
            params.validate().map_err(|e| invalid_config(p, e))?;
            params
        }
    };
    let data = generate_1d(a.n, &params, a.seed)?;
    write_dataset(&a.out, &data, None)?;
    log::info!("wrote {} rows to {}", data.len(), a.out.display());
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let alpha = RiskLevel::new(a.alpha.unwrap_or(cfg.alpha))?;
    let kernel = a.kernel.unwrap_or(cfg.kernel);
    let tuning = TuningParams {
        seed: a.seed.unwrap_or(cfg.tuning.seed),
        ..cfg.tuning
    };
    let cal = read_table(&a.input, true)?;
    let labels = need(&cal.labels, &a.input, "y")?;
    let preds = need(&cal.predictions, &a.input, "pred")?;
    let emb = embeddings(&cal);

    let state = match (a.method, kernel) {
        (MethodChoice::Split, _) => calibrate_split(preds, labels, alpha)?,
        (MethodChoice::MadSplit, KernelChoice::Tuned) => {
            return Err(CliError::usage("invalid_parameter", "madsplit needs a fixed kernel"));
        }
        (MethodChoice::MadSplit, KernelChoice::Fixed(kind)) => {
            let path = a
                .train
                .as_deref()
                .ok_or_else(|| CliError::usage("usage", "madsplit needs --train"))?;
            let train = read_table(path, true)?;
            let errors: Vec<f64> = need(&train.predictions, path, "pred")?
                .iter()
                .zip(need(&train.labels, path, "y")?)
                .map(|(p, y)| (y - p).abs())
                .collect();
            calibrate_madsplit(
                embeddings(&train),
                &errors,
                emb,
                preds,
                labels,
                &KernelSpec { kind, per_point_scales: None },
                alpha,
            )?
        }
        (MethodChoice::Jkplus, KernelChoice::Fixed(kind)) => calibrate_jkplus(
            emb,
            preds,
            labels,
            &KernelSpec { kind, per_point_scales: None },
            alpha,
        )?,
        (MethodChoice::Jkplus | MethodChoice::JkplusTuned, _) => {
            let tuned = tune_kernel(emb, preds, labels, &tuning)?;
            calibrate_jkplus(emb, preds, labels, &tuned.kernel, alpha)?
        }
    };
    std::fs::write(&a.out, state.to_json()? + "\n")?;
    log::info!("{} state for {} points written to {}", state.method().name(), labels.len(), a.out.display());
    Ok(())
}

fn write_intervals(path: &Path, t: &Table, intervals: &[PredictionInterval]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = Vec::new();
    if t.ids.is_some() {
        header.push("id");
    }
    header.extend(["pred", "lower", "upper", "half_width"]);
    if t.labels.is_some() {
        header.push("y");
    }
    w.write_record(&header)?;
    for (i, iv) in intervals.iter().enumerate() {
        let mut rec = Vec::with_capacity(header.len());
        if let Some(ids) = &t.ids {
            rec.push(ids[i].clone());
        }
        rec.extend([iv.center, iv.lower(), iv.upper(), iv.half_width].map(|v| v.to_string()));
        if let Some(y) = &t.labels {
            rec.push(y[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn read_state(path: &Path) -> Result<CalibrationState> {
    Ok(CalibrationState::from_json(&std::fs::read_to_string(existing(path)?)?)?)
}

fn predict(a: PredictArgs) -> Result<()> {
    let mut state = read_state(&a.state)?;
    if let Some(alpha) = a.alpha {
        state = state.with_alpha(RiskLevel::new(alpha)?);
    }
    let t = read_table(&a.input, false)?;
    let preds = need(&t.predictions, &a.input, "pred")?;
    let intervals = state.predict_batch(embeddings(&t), preds)?;
    write_intervals(&a.out, &t, &intervals)?;
    let n_inf = intervals.iter().filter(|iv| iv.is_infinite()).count();
    if n_inf > 0 {
        log::warn!("{n_inf} intervals are infinite: calibration set too small for this alpha");
    }
    Ok(())
}

#[derive(Serialize)]
struct TuneSummary {
    n_points: usize,
    grid: Vec<f64>,
    mean_curve: Vec<f64>,
    curve_argmin: usize,
    has_interior_minimum: bool,
    tuned_objective: f64,
    d_min: f64,
    d_max: f64,
    n_pairs: usize,
}

fn tune(a: TuneArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let params = TuningParams {
        seed: a.seed.unwrap_or(cfg.tuning.seed),
        ..cfg.tuning
    };
    let t = read_table(&a.input, true)?;
    let labels = need(&t.labels, &a.input, "y")?;
    let preds = need(&t.predictions, &a.input, "pred")?;
    let result = tune_kernel(embeddings(&t), preds, labels, &params)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("kernel.json"), serde_json::to_string_pretty(&result.kernel)? + "\n")?;
    result.write_diagnostics_csv(a.out.join("mi_vs_scale.csv"))?;
    write_json(&TuneSummary {
        n_points: labels.len(),
        mean_curve: result.mean_curve(),
        curve_argmin: result.curve_argmin(),
        has_interior_minimum: result.has_interior_minimum(),
        tuned_objective: result.tuned_objective(),
        grid: result.grid,
        d_min: result.d_min,
        d_max: result.d_max,
        n_pairs: result.n_pairs,
    })
}

#[derive(Serialize)]
struct BoundOut {
    alpha: f64,
    alpha_bar: f64,
    alpha_bar_sqrt_mi: f64,
}

#[derive(Serialize)]
struct MiOut {
    value: f64,
    k_neighbors: usize,
    n_samples: usize,
    target: &'static str,
    rho: f64,
    bound: BoundOut,
    /// Bound at the finite-sample risk level; absent when that level is 0.
    bound_finite_n: Option<BoundOut>,
}

fn mi(a: MiArgs) -> Result<()> {
    if !(a.rho > 0.0 && a.rho <= 1.0) {
        return Err(CliError::usage("invalid_parameter", "--rho must lie in (0, 1]"));
    }
    let t = read_table(&a.input, true)?;
    let labels = need(&t.labels, &a.input, "y")?;
    let (s, target): (Vec<f64>, _) = match &t.predictions {
        Some(p) => (p.iter().zip(labels).map(|(p, y)| (y - p).abs()).collect(), "abs_error"),
        None => (labels.clone(), "label"),
    };
    let est = ksg_mutual_information(embeddings(&t), &s, a.k)?;
    let bound_at = |alpha: f64| -> Result<BoundOut> {
        let b = local_coverage_bound(est.value, a.rho, RiskLevel::new(alpha)?)?;
        Ok(BoundOut {
            alpha,
            alpha_bar: b.alpha_bar,
            alpha_bar_sqrt_mi: b.alpha_bar_sqrt_mi,
        })
    };
    let alpha = RiskLevel::new(a.alpha)?;
    let finite = finite_sample_alpha(alpha, est.n_samples);
    write_json(&MiOut {
        value: est.value,
        k_neighbors: est.k_neighbors,
        n_samples: est.n_samples,
        target,
        rho: a.rho,
        bound: bound_at(a.alpha)?,
        bound_finite_n: if finite > 0.0 { Some(bound_at(finite)?) } else { None },
    })
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| {
        CliError::Core(conformal_core::Error::Schema {
            path: path.into(),
            msg: format!("missing `{name}` column"),
        })
    })
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let alpha = RiskLevel::new(a.alpha)?;
    let mut r = csv::Reader::from_path(existing(&a.input)?)?;
    let headers = r.headers()?.clone();
    let cols = [
        column(&headers, "y", &a.input)?,
        column(&headers, "pred", &a.input)?,
        column(&headers, "half_width", &a.input)?,
    ];
    let (mut labels, mut preds, mut intervals) = (Vec::new(), Vec::new(), Vec::new());
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let mut v = [0.0; 3];
        for (slot, &c) in v.iter_mut().zip(&cols) {
            let field = rec.get(c).unwrap_or("");
            *slot = field.trim().parse().map_err(|_| {
                CliError::Core(conformal_core::Error::Parse {
                    path: a.input.clone(),
                    row: row + 2,
                    msg: format!("`{field}` is not a number"),
                })
            })?;
        }
        labels.push(v[0]);
        preds.push(v[1]);
        intervals.push(PredictionInterval {
            center: v[1],
            half_width: v[2],
            alpha,
        });
    }
    let max_err = match (&a.state, a.max_cal_error) {
        (Some(p), _) => read_state(p)?.max_cal_score(),
        (None, Some(m)) => m,
        (None, None) if intervals.iter().any(PredictionInterval::is_infinite) => {
            return Err(CliError::usage(
                "usage",
                "infinite intervals present: pass --state or --max-cal-error",
            ));
        }
        (None, None) => 0.0,
    };
    let m = evaluate(&intervals, &labels, &preds, alpha, max_err)?;
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&m)? + "\n")?;
    }
    write_json(&m)
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.n_cal {
        cfg.sizes.n_cal = v;
    }
    if let Some(v) = a.n_reps {
        cfg.n_reps = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if !a.method.is_empty() {
        cfg.methods = a.method;
    }
    if let Some(v) = a.kernel {
        cfg.kernel = v;
    }
    if let Some(v) = a.out {
        cfg.out_dir = v;
    }
    cfg.validate().map_err(|e| CliError::usage("invalid_config", e.to_string()))?;
    let report = run_bench(&cfg)?;
    let mut out = std::io::stdout().lock();
    for r in &report.methods {
        match &r.summary {
            Some(s) => writeln!(
                out,
                "{:<13} coverage={} IS={} tau_SI={} tau_SQI={} R2_SQI={} incomplete={}",
                r.method.name(),
                format_with_uncertainty(s.coverage, s.uncertainty.coverage),
                format_with_uncertainty(s.is_mean, s.uncertainty.is_mean),
                format_with_uncertainty(s.tau_si, s.uncertainty.tau_si),
                format_with_uncertainty(s.tau_sqi, s.uncertainty.tau_sqi),
                conformal_core::metrics::render_r2(s.r2_sqi),
                r.incomplete.len()
            )?,
            None => writeln!(out, "{:<13} no completed repetitions", r.method.name())?,
        }
    }
    writeln!(out, "report: {}", cfg.out_dir.join("report.json").display())?;
    Ok(())
}
