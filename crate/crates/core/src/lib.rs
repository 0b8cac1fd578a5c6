//! Locally rescaled conformal regression.
//!
//! The crate implements three conformal engines over absolute-error scores:
//!
//! - plain split conformal,
//! - MADSplit, which rescales scores by a kernel estimate of the conditional
//!   mean error fitted on *training* residuals,
//! - the Jackknife+ rescaled-score method, which estimates the conditional
//!   score mean on the calibration set itself with leave-one-out
//!   Nadaraya-Watson means and folds the test point into the quantile through
//!   leave-two-out means, keeping calibration and test scores exchangeable.
//!
//! Supporting modules provide kernels and exact nearest-neighbor search, a KSG
//! mutual-information estimator used to tune per-point RBF length scales,
//! adaptivity metrics (coverage, interval size, Kendall-based adaptivity
//! scores), a 1D heteroscedastic data generator, and a seeded experiment
//! harness producing reproducible reports.

pub mod conformal;
pub mod data;
pub mod error;
pub mod experiment;
pub mod information;
pub mod kernels;
pub mod matrix;
pub mod metrics;
pub mod neighbors;
pub mod rng;
pub mod synthetic;

pub use conformal::{
    calibrate_jkplus, calibrate_madsplit, calibrate_split, conformal_quantile, CalibrationState,
    Method, PredictionInterval,
};
pub use data::{load_dataset, split, write_dataset, Dataset, ModelOutputs, RiskLevel, SplitSpec};
pub use error::{Error, Result};
pub use experiment::{
    run_bench, BenchReport, DataSource, ExperimentConfig, KernelChoice, MethodChoice, MethodReport,
    SplitSizes,
};
pub use information::{
    cantelli_threshold, fit_pca, ksg_mutual_information, local_coverage_bound, markov_coverage,
    mi_objective, tune_kernel, CoverageBound, MIEstimate, PCAProjection, TuningParams,
    TuningResult,
};
pub use kernels::{KernelKind, KernelSpec};
pub use matrix::Matrix;
pub use metrics::{evaluate, kendall_tau, EvaluationReport, RepMetrics};
pub use synthetic::{generate_1d, BaseRegressor, NoiseScale, Synth1DParams};
