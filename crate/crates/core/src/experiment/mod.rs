//! Seeded benchmark harness: split, fit, calibrate, predict, evaluate and
//! write report files.
//!
//! Every random choice is keyed on the run seed and the repetition index, and
//! repetitions are collected in index order, so a run's outputs depend only on
//! its configuration, never on the number of worker threads.

mod config;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{DataSource, ExperimentConfig, KernelChoice, MethodChoice, SplitSizes};

use crate::conformal::{
    calibrate_jkplus, calibrate_madsplit, calibrate_split, CalibrationState, PredictionInterval,
};
use crate::data::{load_dataset, split, write_dataset, CsvFormat, Dataset, ModelOutputs, SplitSpec};
use crate::error::{Error, Result};
use crate::information::{tune_kernel, TuningParams, TuningResult};
use crate::kernels::KernelSpec;
use crate::matrix::Matrix;
use crate::metrics::{evaluate, EvaluationReport, RepMetrics};
use crate::synthetic::generate_1d;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "CONFORMAL_THREADS";

/// A repetition that did not complete for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncompleteRep {
    pub rep: u64,
    pub kind: String,
    pub error: String,
}

/// Results of one method at one calibration size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: MethodChoice,
    pub kernel: String,
    pub n_cal: usize,
    pub n_reps_completed: usize,
    /// `None` when no repetition completed.
    pub summary: Option<EvaluationReport>,
    pub incomplete: Vec<IncompleteRep>,
    pub calibration_fallbacks: usize,
    pub prediction_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub methods: Vec<MethodReport>,
    /// Additional calibration sizes, ordered by size then method.
    pub sweep: Vec<MethodReport>,
}

impl BenchReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn method(&self, m: MethodChoice) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m)
    }
}

/// Worker count from [`THREADS_ENV`], if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    let v = std::env::var(THREADS_ENV).ok()?;
    match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => Some(n),
        _ => {
            log::warn!("ignoring {THREADS_ENV}={v:?}");
            None
        }
    }
}

/// Run the benchmark and write its files under `config.out_dir`, with the
/// worker pool sized by [`THREADS_ENV`].
pub fn run_bench(config: &ExperimentConfig) -> Result<BenchReport> {
    run_bench_with_threads(config, threads_from_env())
}

pub fn run_bench_with_threads(config: &ExperimentConfig, threads: Option<usize>) -> Result<BenchReport> {
    config.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Degenerate(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_inner(config))
}

/// The sample pool with any externally supplied model outputs.
struct Pool {
    data: Dataset,
    outputs: Option<ModelOutputs>,
}

impl Pool {
    fn load(config: &ExperimentConfig) -> Result<Self> {
        match &config.source {
            DataSource::Synthetic { params } => {
                let largest = config.n_cal_values().into_iter().max().unwrap_or(0);
                let n = config.sizes.n_train + largest + config.sizes.n_test;
                Ok(Pool {
                    data: generate_1d(n, params, config.seed)?,
                    outputs: None,
                })
            }
            DataSource::Csv { path } => {
                let (data, outputs) = load_dataset(path, CsvFormat::default())?;
                if outputs.is_some() {
                    log::info!("{}: using the predictions stored in the file", path.display());
                }
                Ok(Pool { data, outputs })
            }
        }
    }

    /// The pool seen by a run with `n` samples. Synthetic draws are
    /// sequential, so a prefix is exactly the pool a smaller run would draw.
    fn view(&self, config: &ExperimentConfig, n: usize) -> Pool {
        match config.source {
            DataSource::Synthetic { .. } if n < self.data.len() => {
                let idx: Vec<usize> = (0..n).collect();
                Pool {
                    data: self.data.subset(&idx),
                    outputs: self.outputs.as_ref().map(|o| o.subset(&idx)),
                }
            }
            _ => Pool {
                data: self.data.clone(),
                outputs: self.outputs.clone(),
            },
        }
    }
}

/// One block of a repetition's split: data, predictions and embeddings.
struct Part {
    data: Dataset,
    preds: Vec<f64>,
    emb: Matrix,
}

struct RepData {
    train: Part,
    cal: Part,
    test: Part,
}

fn prepare_rep(pool: &Pool, config: &ExperimentConfig, n_cal: usize, rep: u64) -> Result<RepData> {
    let spec = SplitSpec {
        seed: config.seed,
        n_train: config.sizes.n_train,
        n_cal,
        n_test: config.sizes.n_test,
        repetition_index: rep,
    };
    let idx = split(pool.data.len(), &spec)?;
    let part = |rows: &[usize], preds: Vec<f64>, emb: Option<Matrix>| {
        let data = pool.data.subset(rows);
        let emb = emb.unwrap_or_else(|| data.features().clone());
        Part { data, preds, emb }
    };
    match &pool.outputs {
        Some(o) => {
            let take = |rows: &[usize]| {
                let s = o.subset(rows);
                part(rows, s.predictions, s.embeddings)
            };
            Ok(RepData {
                train: take(&idx.train),
                cal: take(&idx.cal),
                test: take(&idx.test),
            })
        }
        None => {
            let train = pool.data.subset(&idx.train);
            let model = config.base_regressor.fit(&train)?;
            let fit = |rows: &[usize]| -> Result<Part> {
                let d = pool.data.subset(rows);
                let preds = model.predict(d.features())?;
                Ok(part(rows, preds, None))
            };
            Ok(RepData {
                train: fit(&idx.train)?,
                cal: fit(&idx.cal)?,
                test: fit(&idx.test)?,
            })
        }
    }
}

/// Everything one method produced on one repetition.
struct MethodRun {
    metrics: RepMetrics,
    state: CalibrationState,
    intervals: Vec<PredictionInterval>,
    tuning: Option<TuningResult>,
    prediction_fallbacks: usize,
}

fn run_method(
    method: MethodChoice,
    config: &ExperimentConfig,
    data: &RepData,
    rep: u64,
) -> Result<MethodRun> {
    let alpha = config.risk_level()?;
    let cal = &data.cal;
    let mut tuning = None;
    let tuned = |tuning: &mut Option<TuningResult>| -> Result<KernelSpec> {
        let params = TuningParams {
            seed: config.tuning.seed.wrapping_add(rep),
            ..config.tuning
        };
        let result = tune_kernel(&cal.emb, &cal.preds, cal.data.labels(), &params)?;
        let kernel = result.kernel.clone();
        *tuning = Some(result);
        Ok(kernel)
    };
    let state = match method {
        MethodChoice::Split => calibrate_split(&cal.preds, cal.data.labels(), alpha)?,
        MethodChoice::MadSplit => {
            let KernelChoice::Fixed(kind) = config.kernel else {
                return Err(Error::invalid("kernel", "madsplit needs a fixed kernel"));
            };
            let train = &data.train;
            let errors: Vec<f64> = train
                .preds
                .iter()
                .zip(train.data.labels())
                .map(|(p, y)| (y - p).abs())
                .collect();
            calibrate_madsplit(
                &train.emb,
                &errors,
                &cal.emb,
                &cal.preds,
                cal.data.labels(),
                &KernelSpec { kind, per_point_scales: None },
                alpha,
            )?
        }
        MethodChoice::Jkplus | MethodChoice::JkplusTuned => {
            let kernel = match (method, config.kernel) {
                (MethodChoice::Jkplus, KernelChoice::Fixed(kind)) => KernelSpec {
                    kind,
                    per_point_scales: None,
                },
                _ => tuned(&mut tuning)?,
            };
            calibrate_jkplus(&cal.emb, &cal.preds, cal.data.labels(), &kernel, alpha)?
        }
    };
    let test = &data.test;
    let (intervals, prediction_fallbacks) = state.predict_batch_counted(&test.emb, &test.preds)?;
    let metrics = evaluate(
        &intervals,
        test.data.labels(),
        &test.preds,
        alpha,
        state.max_cal_score(),
    )?;
    Ok(MethodRun {
        metrics,
        state,
        intervals,
        tuning,
        prediction_fallbacks,
    })
}

fn kernel_label(method: MethodChoice, config: &ExperimentConfig) -> String {
    match method {
        MethodChoice::Split => "none".into(),
        MethodChoice::JkplusTuned => "tuned".into(),
        _ => config.kernel.to_string(),
    }
}

/// Per-repetition outcome of every method, in `config.methods` order.
type RepOutcome = Vec<Result<MethodRun>>;

fn run_reps(pool: &Pool, config: &ExperimentConfig, n_cal: usize) -> Vec<RepOutcome> {
    (0..config.n_reps as u64)
        .into_par_iter()
        .map(|rep| match prepare_rep(pool, config, n_cal, rep) {
            Ok(data) => config
                .methods
                .iter()
                .map(|&m| {
                    let out = run_method(m, config, &data, rep);
                    if let Err(e) = &out {
                        log::error!("{m} n_cal={n_cal} rep {rep}: {e}");
                    }
                    out
                })
                .collect(),
            Err(e) => {
                log::error!("n_cal={n_cal} rep {rep}: {e}");
                config
                    .methods
                    .iter()
                    .map(|_| Err(Error::Degenerate(format!("data preparation failed: {e}"))))
                    .collect()
            }
        })
        .collect()
}

fn summarize(config: &ExperimentConfig, n_cal: usize, outcomes: &[RepOutcome]) -> Result<Vec<MethodReport>> {
    config
        .methods
        .iter()
        .enumerate()
        .map(|(j, &method)| {
            let mut reps = Vec::new();
            let mut incomplete = Vec::new();
            let (mut cal_fb, mut pred_fb) = (0, 0);
            for (rep, outcome) in outcomes.iter().enumerate() {
                match &outcome[j] {
                    Ok(run) => {
                        reps.push(run.metrics.clone());
                        cal_fb += run.state.calibration_fallbacks();
                        pred_fb += run.prediction_fallbacks;
                    }
                    Err(e) => incomplete.push(IncompleteRep {
                        rep: rep as u64,
                        kind: e.kind().into(),
                        error: e.to_string(),
                    }),
                }
            }
            let n_reps_completed = reps.len();
            let summary = if reps.is_empty() {
                None
            } else {
                Some(EvaluationReport::aggregate(reps, config.seed)?)
            };
            Ok(MethodReport {
                method,
                kernel: kernel_label(method, config),
                n_cal,
                n_reps_completed,
                summary,
                incomplete,
                calibration_fallbacks: cal_fb,
                prediction_fallbacks: pred_fb,
            })
        })
        .collect()
}

fn run_inner(config: &ExperimentConfig) -> Result<BenchReport> {
    let full = Pool::load(config)?;
    let out = &config.out_dir;
    fs::create_dir_all(out.join("plots"))?;
    fs::create_dir_all(out.join("state"))?;

    let mut methods = Vec::new();
    let mut sweep = Vec::new();
    for (i, n_cal) in config.n_cal_values().into_iter().enumerate() {
        let pool = full.view(config, config.sizes.n_train + n_cal + config.sizes.n_test);
        let outcomes = run_reps(&pool, config, n_cal);
        let reports = summarize(config, n_cal, &outcomes)?;
        if i == 0 {
            write_main_outputs(config, &pool, &outcomes)?;
            methods = reports;
        } else {
            sweep.extend(reports);
        }
    }

    let report = BenchReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: config.clone(),
        methods,
        sweep,
    };
    write_text(&out.join("report.json"), &(report.to_json()? + "\n"))?;
    write_table(&out.join("table.csv"), &report.methods)?;
    let mut curve: Vec<&MethodReport> = report.methods.iter().chain(&report.sweep).collect();
    curve.sort_by_key(|r| (r.method, r.n_cal));
    write_table(&out.join("plots").join("metrics_vs_ncal.csv"), curve)?;
    Ok(report)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

const TABLE_PREFIX: &str = "method,kernel,n_cal,n_reps_completed";

fn write_table<'a>(path: &Path, rows: impl IntoIterator<Item = &'a MethodReport>) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{TABLE_PREFIX},{}", EvaluationReport::CSV_HEADER)?;
    let n_cols = EvaluationReport::CSV_HEADER.split(',').count();
    for r in rows {
        let body = match &r.summary {
            Some(s) => s.csv_row(),
            None => ",".repeat(n_cols - 1),
        };
        writeln!(w, "{},{},{},{},{body}", r.method, r.kernel, r.n_cal, r.n_reps_completed)?;
    }
    w.flush()?;
    Ok(())
}

/// State files for every repetition, interval sizes and tuning curves for
/// repetition 0, and optionally the split data itself.
fn write_main_outputs(config: &ExperimentConfig, pool: &Pool, outcomes: &[RepOutcome]) -> Result<()> {
    let out = &config.out_dir;
    for (rep, outcome) in outcomes.iter().enumerate() {
        for (m, run) in config.methods.iter().zip(outcome) {
            if let Ok(run) = run {
                let path = out.join("state").join(format!("{m}_rep{rep}.json"));
                write_text(&path, &(run.state.to_json()? + "\n"))?;
            }
        }
    }

    let first = &outcomes[0];
    let data = prepare_rep(pool, config, config.sizes.n_cal, 0).ok();
    let mut w = std::io::BufWriter::new(fs::File::create(out.join("plots").join("size_vs_x.csv"))?);
    writeln!(w, "method,x0,y,pred,lower,upper,size")?;
    if let Some(data) = &data {
        let test = &data.test;
        for (m, run) in config.methods.iter().zip(first) {
            let Ok(run) = run else { continue };
            let max_err = run.state.max_cal_score();
            for (i, iv) in run.intervals.iter().enumerate() {
                let size = if iv.is_infinite() { 2.0 * max_err } else { iv.size() };
                writeln!(
                    w,
                    "{m},{},{},{},{},{},{size}",
                    test.data.features().get(i, 0),
                    test.data.labels()[i],
                    test.preds[i],
                    iv.lower(),
                    iv.upper()
                )?;
            }
        }
    }
    w.flush()?;

    for (m, run) in config.methods.iter().zip(first) {
        if let Ok(MethodRun { tuning: Some(t), .. }) = run {
            t.write_diagnostics_csv(out.join("plots").join(format!("mi_vs_scale_{m}.csv")))?;
        }
    }

    if config.write_splits {
        let dir = out.join("splits");
        fs::create_dir_all(&dir)?;
        for rep in 0..config.n_reps as u64 {
            let Ok(data) = prepare_rep(pool, config, config.sizes.n_cal, rep) else {
                continue;
            };
            for (name, part) in [("train", &data.train), ("cal", &data.cal), ("test", &data.test)] {
                let emb = pool
                    .outputs
                    .as_ref()
                    .and_then(|o| o.embeddings.as_ref())
                    .map(|_| part.emb.clone());
                let outputs = ModelOutputs::new(part.preds.clone(), emb)?;
                write_dataset(dir.join(format!("rep{rep}_{name}.csv")), &part.data, Some(&outputs))?;
            }
        }
    }
    Ok(())
}
