//! Coverage, interval size and adaptivity metrics, with repetition
//! aggregation.
//!
//! Adaptivity is summarized three ways: `tau_si`, the Kendall correlation
//! between absolute errors and interval sizes; `tau_sqi`, the Kendall
//! correlation between interval-size decile rank and the `(1 - alpha)` score
//! quantile within each decile; and `r2_sqi`, the fit of the fixed model
//! `ISQ = 2 CSQ` over those deciles.

mod kendall;
mod oracle;
mod sqi;

pub use kendall::kendall_tau;
pub use oracle::oracle_is_ratio;
pub use sqi::{r2_sqi, render_r2, sqi_bins, tau_sqi, SqiBin, SqiBins};

use serde::{Deserialize, Serialize};

use crate::conformal::PredictionInterval;
use crate::data::RiskLevel;
use crate::error::{Error, Result};
use crate::rng::Stream;

pub const DEFAULT_SQI_BINS: usize = 10;
pub const BOOTSTRAP_RESAMPLES: usize = 1000;
const BOOTSTRAP_STREAM: u64 = 0x626f_6f74;

/// Fraction of labels inside the closed intervals.
pub fn coverage(intervals: &[PredictionInterval], labels: &[f64]) -> Result<f64> {
    if intervals.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "labels",
            expected: intervals.len(),
            got: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let hits = intervals.iter().zip(labels).filter(|(iv, y)| iv.contains(**y)).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Kendall correlation between absolute errors and interval sizes.
pub fn tau_si(scores: &[f64], interval_sizes: &[f64]) -> Result<f64> {
    kendall_tau(scores, interval_sizes)
}

/// `NaN` is written as `null` and read back as `NaN`.
pub(crate) mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Metrics of one repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepMetrics {
    pub coverage: f64,
    pub is_mean: f64,
    #[serde(with = "nan_as_null")]
    pub r2_sqi: f64,
    pub tau_sqi: f64,
    pub tau_si: f64,
    pub n_infinite: usize,
    pub n_test: usize,
    /// Interval-size bins left after merging.
    pub sqi_bins: usize,
}

/// Metrics for one repetition. Infinite intervals count as covering and take
/// `max_cal_error` as half-width for every size-based metric.
pub fn evaluate(
    intervals: &[PredictionInterval],
    labels: &[f64],
    predictions: &[f64],
    alpha: RiskLevel,
    max_cal_error: f64,
) -> Result<RepMetrics> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "predictions",
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    let cov = coverage(intervals, labels)?;
    let n_infinite = intervals.iter().filter(|iv| iv.is_infinite()).count();
    if n_infinite > 0 {
        log::warn!("{n_infinite} infinite intervals replaced by the largest calibration error");
    }
    let sizes: Vec<f64> = intervals
        .iter()
        .map(|iv| {
            if iv.is_infinite() {
                2.0 * max_cal_error
            } else {
                iv.size()
            }
        })
        .collect();
    let scores: Vec<f64> = labels.iter().zip(predictions).map(|(y, p)| (y - p).abs()).collect();
    let n = labels.len();
    let (r2, tsqi, nb) = if n >= DEFAULT_SQI_BINS {
        let bins = sqi_bins(&sizes, &scores, alpha, DEFAULT_SQI_BINS)?;
        (r2_sqi(&bins), tau_sqi(&bins)?, bins.bins.len())
    } else {
        (f64::NAN, 0.0, 0)
    };
    let tsi = if n >= 2 { tau_si(&scores, &sizes)? } else { 0.0 };
    Ok(RepMetrics {
        coverage: cov,
        is_mean: sizes.iter().sum::<f64>() / n as f64,
        r2_sqi: r2,
        tau_sqi: tsqi,
        tau_si: tsi,
        n_infinite,
        n_test: n,
        sqi_bins: nb,
    })
}

/// Spread of each aggregated metric: the 67th percentile of the absolute
/// deviation between bootstrap means and the sample mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Uncertainty {
    pub coverage: f64,
    pub is_mean: f64,
    #[serde(with = "nan_as_null")]
    pub r2_sqi: f64,
    pub tau_sqi: f64,
    pub tau_si: f64,
}

/// Repetition-aggregated metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub coverage: f64,
    pub is_mean: f64,
    /// Mean over repetitions where it is defined.
    #[serde(with = "nan_as_null")]
    pub r2_sqi: f64,
    pub tau_sqi: f64,
    pub tau_si: f64,
    pub n_infinite: usize,
    pub uncertainty: Uncertainty,
    pub reps: Vec<RepMetrics>,
}

fn finite_mean(v: &[f64]) -> f64 {
    let f: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if f.is_empty() {
        f64::NAN
    } else {
        f.iter().sum::<f64>() / f.len() as f64
    }
}

/// 67th percentile of `|bootstrap mean - mean|` over `resamples` seeded draws.
pub fn bootstrap_uncertainty(values: &[f64], resamples: usize, seed: u64) -> f64 {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.len() < 2 || resamples == 0 {
        return if v.is_empty() { f64::NAN } else { 0.0 };
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let mut rng = Stream::new(seed, BOOTSTRAP_STREAM);
    let mut dev: Vec<f64> = (0..resamples)
        .map(|_| {
            let s: f64 = (0..v.len()).map(|_| v[rng.below(v.len())]).sum();
            (s / v.len() as f64 - mean).abs()
        })
        .collect();
    dev.sort_by(f64::total_cmp);
    let k = ((0.67 * resamples as f64).ceil() as usize).clamp(1, resamples);
    dev[k - 1]
}

impl EvaluationReport {
    pub fn aggregate(reps: Vec<RepMetrics>, seed: u64) -> Result<Self> {
        if reps.is_empty() {
            return Err(Error::Empty("repetitions"));
        }
        let col = |f: fn(&RepMetrics) -> f64| -> Vec<f64> { reps.iter().map(f).collect() };
        let cols = [
            col(|r| r.coverage),
            col(|r| r.is_mean),
            col(|r| r.r2_sqi),
            col(|r| r.tau_sqi),
            col(|r| r.tau_si),
        ];
        let means: Vec<f64> = cols.iter().map(|c| finite_mean(c)).collect();
        let unc: Vec<f64> = cols
            .iter()
            .enumerate()
            .map(|(i, c)| bootstrap_uncertainty(c, BOOTSTRAP_RESAMPLES, seed.wrapping_add(i as u64)))
            .collect();
        Ok(Self {
            coverage: means[0],
            is_mean: means[1],
            r2_sqi: means[2],
            tau_sqi: means[3],
            tau_si: means[4],
            n_infinite: reps.iter().map(|r| r.n_infinite).sum(),
            uncertainty: Uncertainty {
                coverage: unc[0],
                is_mean: unc[1],
                r2_sqi: unc[2],
                tau_sqi: unc[3],
                tau_si: unc[4],
            },
            reps,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub const CSV_HEADER: &'static str =
        "coverage,coverage_unc,is_mean,is_mean_unc,r2_sqi,r2_sqi_unc,r2_sqi_display,tau_sqi,tau_sqi_unc,tau_si,tau_si_unc,n_infinite,n_reps";

    /// One CSV row matching [`Self::CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        let u = &self.uncertainty;
        let f = |v: f64| if v.is_nan() { String::new() } else { v.to_string() };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            f(self.coverage),
            f(u.coverage),
            f(self.is_mean),
            f(u.is_mean),
            f(self.r2_sqi),
            f(u.r2_sqi),
            render_r2(self.r2_sqi),
            f(self.tau_sqi),
            f(u.tau_sqi),
            f(self.tau_si),
            f(u.tau_si),
            self.n_infinite,
            self.reps.len()
        )
    }
}

/// `mean(unc)` notation with the uncertainty on the last shown digit, e.g.
/// `0.952(2)`.
pub fn format_with_uncertainty(mean: f64, unc: f64) -> String {
    if !mean.is_finite() {
        return "nan".into();
    }
    if !(unc.is_finite() && unc > 0.0) {
        return format!("{mean:.3}");
    }
    let digits = (-unc.log10().floor()).max(0.0) as usize;
    let scale = 10f64.powi(digits as i32);
    let u = (unc * scale).round().max(1.0) as u64;
    format!("{mean:.digits$}({u})")
}
