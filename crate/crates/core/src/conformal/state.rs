use std::cmp::Ordering;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::quantile::conformal_quantile;
use super::PredictionInterval;
use crate::data::RiskLevel;
use crate::error::{Error, Result};
use crate::kernels::{held_out_means_at, nw_mean_at, rbf, KernelSpec, LeaveTwoOut};
use crate::matrix::{sq_dist, Matrix};
use crate::neighbors::NeighborIndex;

pub const STATE_VERSION: u32 = 1;

/// Relative floor applied to every conditional-mean denominator.
const FLOOR_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "split")]
    Split,
    #[serde(rename = "madsplit")]
    MadSplit,
    #[serde(rename = "jkplus")]
    JackknifePlusRescaled,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Split => "split",
            Method::MadSplit => "madsplit",
            Method::JackknifePlusRescaled => "jkplus",
        }
    }
}

/// Training residuals backing the MADSplit scale estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingErrors {
    pub embeddings: Matrix,
    pub abs_errors: Vec<f64>,
}

/// Everything needed to price an interval for any test input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationState {
    version: u32,
    method: Method,
    alpha: RiskLevel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cal_embeddings: Option<Matrix>,
    cal_scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rescaled_scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<KernelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_error_index: Option<TrainingErrors>,
    score_floor: f64,
    calibration_fallbacks: usize,
    #[serde(skip)]
    global_quantile: OnceLock<f64>,
    #[serde(skip)]
    cal_index: OnceLock<NeighborIndex>,
    #[serde(skip)]
    train_index: OnceLock<NeighborIndex>,
}

impl PartialEq for CalibrationState {
    fn eq(&self, other: &Self) -> bool {
        self.method == other.method
            && self.alpha == other.alpha
            && self.cal_embeddings == other.cal_embeddings
            && self.cal_scores == other.cal_scores
            && self.rescaled_scores == other.rescaled_scores
            && self.kernel == other.kernel
            && self.train_error_index == other.train_error_index
            && self.score_floor == other.score_floor
    }
}

fn abs_errors(predictions: &[f64], labels: &[f64]) -> Result<Vec<f64>> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "labels",
            expected: predictions.len(),
            got: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let s: Vec<f64> = predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| (y - p).abs())
        .collect();
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite calibration score".into()));
    }
    Ok(s)
}

fn score_floor(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(0.0, f64::max);
    FLOOR_REL * if max > 0.0 { max } else { 1.0 }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Canonical ordering of points by (embedding, value, extra key).
fn canonical_order(points: &Matrix, values: &[f64], extra: Option<&[f64]>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.rows()).collect();
    order.sort_by(|&a, &b| {
        lex_cmp(points.row(a), points.row(b))
            .then(values[a].total_cmp(&values[b]))
            .then_with(|| match extra {
                Some(e) => e[a].total_cmp(&e[b]),
                None => Ordering::Equal,
            })
    });
    order
}

fn check_rows(points: &Matrix, n: usize, what: &'static str) -> Result<()> {
    if points.rows() != n {
        return Err(Error::LengthMismatch {
            what,
            expected: n,
            got: points.rows(),
        });
    }
    Ok(())
}

/// Plain split-conformal calibration.
pub fn calibrate_split(
    predictions: &[f64],
    labels: &[f64],
    alpha: RiskLevel,
) -> Result<CalibrationState> {
    let mut scores = abs_errors(predictions, labels)?;
    scores.sort_by(f64::total_cmp);
    Ok(CalibrationState::assemble(
        Method::Split,
        alpha,
        None,
        scores,
        None,
        None,
        None,
        0,
    ))
}

/// MADSplit calibration: scores rescaled by a kernel mean of training
/// absolute errors.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_madsplit(
    train_embeddings: &Matrix,
    train_abs_errors: &[f64],
    cal_embeddings: &Matrix,
    cal_predictions: &[f64],
    cal_labels: &[f64],
    kernel: &KernelSpec,
    alpha: RiskLevel,
) -> Result<CalibrationState> {
    if train_abs_errors.is_empty() {
        return Err(Error::Empty("training set"));
    }
    check_rows(train_embeddings, train_abs_errors.len(), "train_embeddings")?;
    if let Some(bad) = train_abs_errors.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
        return Err(Error::invalid("train_abs_errors", format!("{bad} is not a non-negative error")));
    }
    if kernel.per_point_scales.is_some() {
        return Err(Error::invalid(
            "kernel",
            "MADSplit takes a single kernel; per-point scales are not supported",
        ));
    }
    kernel.validate(None)?;
    if train_embeddings.cols() != cal_embeddings.cols() {
        return Err(Error::DimensionMismatch {
            expected: train_embeddings.cols(),
            got: cal_embeddings.cols(),
        });
    }
    let scores = abs_errors(cal_predictions, cal_labels)?;
    check_rows(cal_embeddings, scores.len(), "cal_embeddings")?;

    let order = canonical_order(cal_embeddings, &scores, None);
    let cal_embeddings = cal_embeddings.select_rows(&order);
    let scores: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    let t_order = canonical_order(train_embeddings, train_abs_errors, None);
    let train = TrainingErrors {
        embeddings: train_embeddings.select_rows(&t_order),
        abs_errors: t_order.iter().map(|&i| train_abs_errors[i]).collect(),
    };

    let floor = score_floor(&scores);
    let train_index = NeighborIndex::build(&train.embeddings);
    let sigma: Vec<_> = (0..scores.len())
        .into_par_iter()
        .map(|i| {
            nw_mean_at(
                &kernel.kind,
                cal_embeddings.row(i),
                &train.embeddings,
                &train_index,
                &train.abs_errors,
            )
        })
        .collect();
    let fallbacks = sigma.iter().filter(|h| h.fallback).count();
    if fallbacks > 0 {
        log::warn!("madsplit: {fallbacks} calibration points used the uniform kernel fallback");
    }
    let rescaled = scores
        .iter()
        .zip(&sigma)
        .map(|(s, h)| s / h.mean.max(floor))
        .collect();
    let state = CalibrationState::assemble(
        Method::MadSplit,
        alpha,
        Some(cal_embeddings),
        scores,
        Some(rescaled),
        Some(kernel.clone()),
        Some(train),
        fallbacks,
    );
    let _ = state.train_index.set(train_index);
    Ok(state)
}

/// Jackknife+ rescaled-score calibration.
pub fn calibrate_jkplus(
    cal_embeddings: &Matrix,
    cal_predictions: &[f64],
    cal_labels: &[f64],
    kernel: &KernelSpec,
    alpha: RiskLevel,
) -> Result<CalibrationState> {
    let scores = abs_errors(cal_predictions, cal_labels)?;
    check_rows(cal_embeddings, scores.len(), "cal_embeddings")?;
    if scores.len() < 3 {
        return Err(Error::invalid(
            "calibration size",
            format!("Jackknife+ needs at least 3 calibration points, got {}", scores.len()),
        ));
    }
    kernel.validate(Some(scores.len()))?;

    let order = canonical_order(cal_embeddings, &scores, kernel.per_point_scales.as_deref());
    let emb = cal_embeddings.select_rows(&order);
    let scores: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    let kernel = kernel.permuted(&order);

    let floor = score_floor(&scores);
    let index = NeighborIndex::build(&emb);
    let means = loo_means(&kernel, &emb, &index, &scores);
    let fallbacks = means.iter().filter(|m| m.1).count();
    if fallbacks > 0 {
        log::warn!("jkplus: {fallbacks} calibration points used the uniform kernel fallback");
    }
    let rescaled = scores
        .iter()
        .zip(&means)
        .map(|(s, m)| s / m.0.max(floor))
        .collect();
    let state = CalibrationState::assemble(
        Method::JackknifePlusRescaled,
        alpha,
        Some(emb),
        scores,
        Some(rescaled),
        Some(kernel),
        None,
        fallbacks,
    );
    let _ = state.cal_index.set(index);
    Ok(state)
}

/// Leave-one-out means at every calibration point; `(mean, fallback)`.
pub(crate) fn loo_means(
    kernel: &KernelSpec,
    points: &Matrix,
    index: &NeighborIndex,
    scores: &[f64],
) -> Vec<(f64, bool)> {
    let n = points.rows();
    let total: f64 = scores.iter().sum();
    let uniform = |i: usize| ((total - scores[i]) / (n - 1) as f64, true);
    match &kernel.per_point_scales {
        None => {
            let table = LeaveTwoOut::new(kernel.kind, points, scores, index);
            (0..n)
                .map(|i| table.loo_mean(i).map_or_else(|_| uniform(i), |m| (m, false)))
                .collect()
        }
        Some(scales) => (0..n)
            .into_par_iter()
            .map(|i| {
                let q = points.row(i);
                let (mut a, mut b) = (0.0, 0.0);
                for j in (0..n).filter(|&j| j != i) {
                    let w = rbf(scales[i], sq_dist(q, points.row(j)));
                    a += w * scores[j];
                    b += w;
                }
                if b > 0.0 {
                    (a / b, false)
                } else {
                    uniform(i)
                }
            })
            .collect(),
    }
}

impl CalibrationState {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        method: Method,
        alpha: RiskLevel,
        cal_embeddings: Option<Matrix>,
        cal_scores: Vec<f64>,
        rescaled_scores: Option<Vec<f64>>,
        kernel: Option<KernelSpec>,
        train_error_index: Option<TrainingErrors>,
        calibration_fallbacks: usize,
    ) -> Self {
        let score_floor = score_floor(&cal_scores);
        Self {
            version: STATE_VERSION,
            method,
            alpha,
            cal_embeddings,
            cal_scores,
            rescaled_scores,
            kernel,
            train_error_index,
            score_floor,
            calibration_fallbacks,
            global_quantile: OnceLock::new(),
            cal_index: OnceLock::new(),
            train_index: OnceLock::new(),
        }
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn alpha(&self) -> RiskLevel {
        self.alpha
    }

    /// Raw calibration scores in canonical order.
    pub fn cal_scores(&self) -> &[f64] {
        &self.cal_scores
    }

    pub fn rescaled_scores(&self) -> Option<&[f64]> {
        self.rescaled_scores.as_deref()
    }

    pub fn cal_embeddings(&self) -> Option<&Matrix> {
        self.cal_embeddings.as_ref()
    }

    pub fn kernel(&self) -> Option<&KernelSpec> {
        self.kernel.as_ref()
    }

    pub fn score_floor(&self) -> f64 {
        self.score_floor
    }

    /// Calibration points whose conditional mean used the uniform fallback.
    pub fn calibration_fallbacks(&self) -> usize {
        self.calibration_fallbacks
    }

    /// Largest calibration score; replaces infinite intervals in metrics.
    pub fn max_cal_score(&self) -> f64 {
        self.cal_scores.iter().copied().fold(0.0, f64::max)
    }

    /// Same state with a different risk level; all score vectors are reused.
    pub fn with_alpha(&self, alpha: RiskLevel) -> Self {
        let mut s = self.clone();
        s.alpha = alpha;
        s.global_quantile = OnceLock::new();
        s
    }

    /// Conformal quantile of the raw (Split) or rescaled (MADSplit) scores.
    fn global_quantile(&self) -> Result<f64> {
        if let Some(q) = self.global_quantile.get() {
            return Ok(*q);
        }
        let scores = match self.method {
            Method::MadSplit => self.rescaled()?,
            _ => &self.cal_scores,
        };
        let q = conformal_quantile(scores, self.alpha)?;
        Ok(*self.global_quantile.get_or_init(|| q))
    }

    fn rescaled(&self) -> Result<&[f64]> {
        self.rescaled_scores
            .as_deref()
            .ok_or_else(|| Error::Degenerate("state has no rescaled scores".into()))
    }

    fn embeddings(&self) -> Result<&Matrix> {
        self.cal_embeddings
            .as_ref()
            .ok_or_else(|| Error::Degenerate("state has no calibration embeddings".into()))
    }

    fn kernel_spec(&self) -> Result<&KernelSpec> {
        self.kernel
            .as_ref()
            .ok_or_else(|| Error::Degenerate("state has no kernel".into()))
    }

    fn check_dim(&self, embedding: &[f64], reference: &Matrix) -> Result<()> {
        if embedding.len() != reference.cols() {
            return Err(Error::DimensionMismatch {
                expected: reference.cols(),
                got: embedding.len(),
            });
        }
        Ok(())
    }

    /// Interval for one test input; also reports how many held-out means
    /// used the uniform fallback.
    pub fn predict_counted(
        &self,
        embedding: &[f64],
        prediction: f64,
    ) -> Result<(PredictionInterval, usize)> {
        let (half_width, fallbacks) = match self.method {
            Method::Split => (self.global_quantile()?, 0),
            Method::MadSplit => {
                let train = self
                    .train_error_index
                    .as_ref()
                    .ok_or_else(|| Error::Degenerate("state has no training errors".into()))?;
                self.check_dim(embedding, &train.embeddings)?;
                let index = self
                    .train_index
                    .get_or_init(|| NeighborIndex::build(&train.embeddings));
                let sigma = nw_mean_at(
                    &self.kernel_spec()?.kind,
                    embedding,
                    &train.embeddings,
                    index,
                    &train.abs_errors,
                );
                let q = self.global_quantile()?;
                let hw = if q.is_infinite() {
                    q
                } else {
                    q * sigma.mean.max(self.score_floor)
                };
                (hw, usize::from(sigma.fallback))
            }
            Method::JackknifePlusRescaled => {
                let emb = self.embeddings()?;
                self.check_dim(embedding, emb)?;
                let index = self.cal_index.get_or_init(|| NeighborIndex::build(emb));
                let held = held_out_means_at(self.kernel_spec()?, embedding, emb, index, &self.cal_scores);
                let rescaled = self.rescaled()?;
                let products: Vec<f64> = held
                    .iter()
                    .zip(rescaled)
                    .map(|(h, s)| h.mean.max(self.score_floor) * s)
                    .collect();
                let fallbacks = held.iter().filter(|h| h.fallback).count();
                (conformal_quantile(&products, self.alpha)?, fallbacks)
            }
        };
        Ok((
            PredictionInterval {
                center: prediction,
                half_width,
                alpha: self.alpha,
            },
            fallbacks,
        ))
    }

    pub fn predict_interval(&self, embedding: &[f64], prediction: f64) -> Result<PredictionInterval> {
        self.predict_counted(embedding, prediction).map(|(iv, _)| iv)
    }

    /// Element-wise [`predict_interval`](Self::predict_interval), parallel
    /// over test points; output order follows input order.
    pub fn predict_batch(
        &self,
        embeddings: &Matrix,
        predictions: &[f64],
    ) -> Result<Vec<PredictionInterval>> {
        self.predict_batch_counted(embeddings, predictions)
            .map(|(v, _)| v)
    }

    pub fn predict_batch_counted(
        &self,
        embeddings: &Matrix,
        predictions: &[f64],
    ) -> Result<(Vec<PredictionInterval>, usize)> {
        check_rows(embeddings, predictions.len(), "test embeddings")?;
        let out: Vec<(PredictionInterval, usize)> = (0..predictions.len())
            .into_par_iter()
            .map(|i| self.predict_counted(embeddings.row(i), predictions[i]))
            .collect::<Result<_>>()?;
        let fallbacks = out.iter().map(|o| o.1).sum();
        if fallbacks > 0 {
            log::warn!("{}: {fallbacks} held-out means used the uniform kernel fallback", self.method.name());
        }
        Ok((out.into_iter().map(|o| o.0).collect(), fallbacks))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let state: Self = serde_json::from_str(text)?;
        if state.version != STATE_VERSION {
            return Err(Error::StateVersion(state.version));
        }
        if let Some(r) = &state.rescaled_scores {
            if r.len() != state.cal_scores.len() {
                return Err(Error::LengthMismatch {
                    what: "rescaled_scores",
                    expected: state.cal_scores.len(),
                    got: r.len(),
                });
            }
        }
        if let Some(e) = &state.cal_embeddings {
            check_rows(e, state.cal_scores.len(), "cal_embeddings")?;
        }
        Ok(state)
    }

    /// Interval obtained by rescaling with a mean at the test input that
    /// includes every calibration point. It breaks calibration/test
    /// exchangeability and only serves as a reference in tests.
    #[cfg(test)]
    pub(crate) fn naive_half_width(&self, embedding: &[f64]) -> Result<f64> {
        let emb = self.embeddings()?;
        let index = self.cal_index.get_or_init(|| NeighborIndex::build(emb));
        let kind = self.kernel_spec()?.kind;
        let m = nw_mean_at(&kind, embedding, emb, index, &self.cal_scores);
        Ok(m.mean.max(self.score_floor) * conformal_quantile(self.rescaled()?, self.alpha)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelKind;
    use crate::rng::Stream;
    use proptest::prelude::*;

    fn alpha(a: f64) -> RiskLevel {
        RiskLevel::new(a).unwrap()
    }

    fn instance(n: usize, d: usize, seed: u64) -> (Matrix, Vec<f64>, Vec<f64>) {
        let mut s = Stream::new(seed, 11);
        let pts: Vec<f64> = (0..n * d).map(|_| s.uniform()).collect();
        let emb = Matrix::new(n, d, pts).unwrap();
        let preds: Vec<f64> = (0..n).map(|_| s.uniform()).collect();
        let labels: Vec<f64> = (0..n)
            .map(|i| preds[i] + (0.1 + emb.get(i, 0)) * s.normal())
            .collect();
        (emb, preds, labels)
    }

    #[test]
    fn split_perfect_model() {
        let p = vec![1.0, 2.0, 3.0, 4.0];
        let st = calibrate_split(&p, &p, alpha(0.25)).unwrap();
        let iv = st.predict_interval(&[], 5.0).unwrap();
        assert_eq!(iv.half_width, 0.0);
        assert_eq!((iv.lower(), iv.upper()), (5.0, 5.0));
    }

    #[test]
    fn split_index_arithmetic() {
        let labels: Vec<f64> = (1..=100).map(f64::from).collect();
        let st = calibrate_split(&vec![0.0; 100], &labels, alpha(0.05)).unwrap();
        assert_eq!(st.predict_interval(&[], 0.0).unwrap().half_width, 96.0);
        assert!(calibrate_split(&[0.0], &[0.0, 1.0], alpha(0.1)).is_err());
    }

    #[test]
    fn split_matches_independent_reimplementation() {
        let (_, p, y) = instance(57, 1, 4);
        for a in [0.05, 0.1, 0.3] {
            let st = calibrate_split(&p, &y, alpha(a)).unwrap();
            let mut s: Vec<f64> = p.iter().zip(&y).map(|(p, y)| (p - y).abs()).collect();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let k = ((1.0 - a) * 58.0 - 1e-9).ceil() as usize;
            assert_eq!(st.predict_interval(&[], 0.0).unwrap().half_width, s[k - 1]);
        }
    }

    #[test]
    fn jkplus_constant_scores() {
        let (emb, p, _) = instance(20, 2, 1);
        let y: Vec<f64> = p.iter().enumerate().map(|(i, p)| if i % 2 == 0 { p + 0.3 } else { p - 0.3 }).collect();
        for k in [KernelSpec::knn(3), KernelSpec::rbf(0.2)] {
            let st = calibrate_jkplus(&emb, &p, &y, &k, alpha(0.1)).unwrap();
            for r in st.rescaled_scores().unwrap() {
                assert!((r - 1.0).abs() < 1e-12);
            }
            let iv = st.predict_interval(&[0.3, 0.7], 2.0).unwrap();
            assert!((iv.half_width - 0.3).abs() < 1e-12);
            let sp = calibrate_split(&p, &y, alpha(0.1)).unwrap();
            assert!((sp.predict_interval(&[], 2.0).unwrap().half_width - iv.half_width).abs() < 1e-12);
        }
    }

    #[test]
    fn jkplus_three_points_by_hand() {
        let emb = Matrix::column(vec![0.0, 1.0, 2.0]);
        let p = [0.0; 3];
        let y = [1.0, 2.0, 4.0];
        let st = calibrate_jkplus(&emb, &p, &y, &KernelSpec::knn(10), alpha(0.2)).unwrap();
        let r = st.rescaled_scores().unwrap();
        assert!((r[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((r[1] - 2.0 / 2.5).abs() < 1e-15);
        assert!((r[2] - 4.0 / 1.5).abs() < 1e-15);
        assert!(calibrate_jkplus(&Matrix::column(vec![0.0, 1.0]), &[0.0; 2], &[1.0; 2], &KernelSpec::knn(1), alpha(0.2)).is_err());
    }

    #[test]
    fn jkplus_all_neighbors_far_query_uses_leave_one_out_means() {
        let (emb, p, y) = instance(15, 1, 8);
        let st = calibrate_jkplus(&emb, &p, &y, &KernelSpec::knn(50), alpha(0.2)).unwrap();
        let s = st.cal_scores();
        let total: f64 = s.iter().sum();
        let n = s.len() as f64;
        let mut products: Vec<f64> = s
            .iter()
            .zip(st.rescaled_scores().unwrap())
            .map(|(si, r)| (total - si) / (n - 1.0) * r)
            .collect();
        products.sort_by(f64::total_cmp);
        let rank = super::super::conformal_rank(s.len(), alpha(0.2));
        let iv = st.predict_interval(&[1e6], 0.0).unwrap();
        assert!((iv.half_width - products[rank - 1]).abs() < 1e-12 * products[rank - 1]);
    }

    #[test]
    fn rescaled_times_mean_recovers_scores() {
        let (emb, p, y) = instance(40, 2, 3);
        let st = calibrate_jkplus(&emb, &p, &y, &KernelSpec::knn(5), alpha(0.1)).unwrap();
        let e = st.cal_embeddings().unwrap();
        let index = NeighborIndex::build(e);
        let means = loo_means(st.kernel().unwrap(), e, &index, st.cal_scores());
        for ((s, r), m) in st.cal_scores().iter().zip(st.rescaled_scores().unwrap()).zip(&means) {
            assert!((r * m.0 - s).abs() <= 1e-9 * s.max(1e-300));
        }
    }

    /// Mean of `scores` over `pool` at `q`, computed from scratch.
    fn brute_mean(kind: KernelKind, q: &[f64], emb: &Matrix, scores: &[f64], pool: &[usize]) -> f64 {
        let mut d: Vec<(f64, usize)> = pool.iter().map(|&j| (sq_dist(q, emb.row(j)), j)).collect();
        d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        match kind {
            KernelKind::Knn { k } => {
                let kth = d[k.min(d.len()) - 1].0;
                let m: Vec<f64> = d.iter().filter(|x| x.0 <= kth).map(|x| scores[x.1]).collect();
                m.iter().sum::<f64>() / m.len() as f64
            }
            KernelKind::Rbf { length_scale } => {
                let w: Vec<f64> = d.iter().map(|x| (-x.0 / (length_scale * length_scale)).exp()).collect();
                d.iter().zip(&w).map(|(x, w)| w * scores[x.1]).sum::<f64>() / w.iter().sum::<f64>()
            }
        }
    }

    #[test]
    fn jkplus_matches_brute_force_on_thirty_points() {
        for seed in 0..50u64 {
            let (emb, p, y) = instance(30, 2, 100 + seed);
            let kernels = [KernelSpec::knn(1 + (seed as usize % 7)), KernelSpec::rbf(0.1 + 0.01 * seed as f64)];
            for kernel in kernels {
                let st = calibrate_jkplus(&emb, &p, &y, &kernel, alpha(0.1)).unwrap();
                let ce = st.cal_embeddings().unwrap();
                let sc = st.cal_scores();
                let all: Vec<usize> = (0..30).collect();
                let mut plus = Vec::new();
                for i in 0..30 {
                    let pool: Vec<usize> = all.iter().copied().filter(|&j| j != i).collect();
                    let m = brute_mean(kernel.kind, ce.row(i), ce, sc, &pool);
                    plus.push(sc[i] / m);
                    let got = st.rescaled_scores().unwrap()[i];
                    assert!((got - plus[i]).abs() <= 1e-10 * plus[i].max(1e-300), "{got} {}", plus[i]);
                }
                let q = [0.37, 0.61];
                let mut products: Vec<f64> = (0..30)
                    .map(|i| {
                        let pool: Vec<usize> = all.iter().copied().filter(|&j| j != i).collect();
                        brute_mean(kernel.kind, &q, ce, sc, &pool) * plus[i]
                    })
                    .collect();
                products.sort_by(f64::total_cmp);
                let want = products[27];
                let got = st.predict_interval(&q, 0.0).unwrap().half_width;
                assert!((got - want).abs() <= 1e-10 * want, "{got} {want}");
            }
        }
    }

    #[test]
    fn madsplit_constant_training_errors() {
        let (emb, p, y) = instance(30, 1, 5);
        let (temb, _, _) = instance(20, 1, 6);
        let st = calibrate_madsplit(&temb, &[0.5; 20], &emb, &p, &y, &KernelSpec::knn(4), alpha(0.1)).unwrap();
        for (r, s) in st.rescaled_scores().unwrap().iter().zip(st.cal_scores()) {
            assert!((r - s / 0.5).abs() < 1e-12);
        }
        let split = calibrate_split(&p, &y, alpha(0.1)).unwrap();
        let a = st.predict_interval(&[0.2], 0.0).unwrap().half_width;
        let b = split.predict_interval(&[], 0.0).unwrap().half_width;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn madsplit_zero_training_errors_is_non_adaptive() {
        let (emb, p, y) = instance(30, 1, 5);
        let (temb, _, _) = instance(20, 1, 6);
        let st = calibrate_madsplit(&temb, &[0.0; 20], &emb, &p, &y, &KernelSpec::knn(4), alpha(0.1)).unwrap();
        let floor = st.score_floor();
        for (r, s) in st.rescaled_scores().unwrap().iter().zip(st.cal_scores()) {
            assert_eq!(*r, s / floor);
        }
        let widths: Vec<f64> = [0.0, 0.3, 0.9]
            .iter()
            .map(|x| st.predict_interval(&[*x], 0.0).unwrap().half_width)
            .collect();
        assert!(widths.iter().all(|w| *w == widths[0]));
        let split = calibrate_split(&p, &y, alpha(0.1)).unwrap();
        let b = split.predict_interval(&[], 0.0).unwrap().half_width;
        assert!((widths[0] - b).abs() <= 1e-12 * b);
    }

    #[test]
    fn madsplit_matches_brute_force_means() {
        let (emb, p, y) = instance(20, 2, 12);
        let (temb, _, _) = instance(25, 2, 13);
        let mut s = Stream::new(1, 1);
        let terr: Vec<f64> = (0..25).map(|_| s.uniform()).collect();
        for kernel in [KernelSpec::knn(4), KernelSpec::rbf(0.3)] {
            let st = calibrate_madsplit(&temb, &terr, &emb, &p, &y, &kernel, alpha(0.1)).unwrap();
            let ce = st.cal_embeddings().unwrap();
            for (i, (r, sc)) in st.rescaled_scores().unwrap().iter().zip(st.cal_scores()).enumerate() {
                let q = ce.row(i);
                let mut d: Vec<(f64, usize)> = (0..25).map(|j| (sq_dist(q, temb.row(j)), j)).collect();
                d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                let sigma = match kernel.kind {
                    KernelKind::Knn { k } => d[..k].iter().map(|x| terr[x.1]).sum::<f64>() / k as f64,
                    KernelKind::Rbf { length_scale } => {
                        let w: Vec<f64> = d.iter().map(|x| (-x.0 / (length_scale * length_scale)).exp()).collect();
                        d.iter().zip(&w).map(|(x, w)| w * terr[x.1]).sum::<f64>() / w.iter().sum::<f64>()
                    }
                };
                assert!((r - sc / sigma).abs() <= 1e-12 * r.abs().max(1.0));
            }
        }
    }

    #[test]
    fn degenerate_rbf_falls_back() {
        let emb = Matrix::column(vec![0.0, 10.0, 20.0, 30.0]);
        let p = [0.0; 4];
        let y = [1.0, 2.0, 3.0, 4.0];
        let st = calibrate_jkplus(&emb, &p, &y, &KernelSpec::rbf(1e-3), alpha(0.2)).unwrap();
        assert_eq!(st.calibration_fallbacks(), 4);
        let (iv, fb) = st.predict_counted(&[1e4], 0.0).unwrap();
        assert_eq!(fb, 4);
        assert!(iv.half_width.is_finite());
    }

    #[test]
    fn infeasible_quantile_gives_infinite_sentinel() {
        let (emb, p, y) = instance(10, 1, 2);
        let st = calibrate_jkplus(&emb, &p, &y, &KernelSpec::knn(3), alpha(0.01)).unwrap();
        let iv = st.predict_interval(&[0.5], 1.0).unwrap();
        assert!(iv.is_infinite());
        assert!(iv.contains(1e9));
    }

    #[test]
    fn naive_interval_close_for_flat_kernel() {
        // With a flat kernel the leave-one-out means differ from the full mean
        // by O(1/N), so the exchangeable interval tracks the naive one.
        let (emb, p, y) = instance(400, 1, 21);
        let st = calibrate_jkplus(&emb, &p, &y, &KernelSpec::rbf(1e6), alpha(0.1)).unwrap();
        let a = st.predict_interval(&[0.4], 0.0).unwrap().half_width;
        let b = st.naive_half_width(&[0.4]).unwrap();
        assert!((a - b).abs() < 0.02 * b, "{a} vs {b}");
    }

    #[test]
    fn json_round_trip() {
        let (emb, p, y) = instance(25, 2, 31);
        let (temb, _, _) = instance(10, 2, 32);
        let states = [
            calibrate_split(&p, &y, alpha(0.1)).unwrap(),
            calibrate_madsplit(&temb, &[0.3; 10], &emb, &p, &y, &KernelSpec::knn(3), alpha(0.1)).unwrap(),
            calibrate_jkplus(&emb, &p, &y, &KernelSpec::knn(3), alpha(0.1)).unwrap(),
            calibrate_jkplus(&emb, &p, &y, &KernelSpec::rbf_per_point(vec![0.2; 25]).unwrap(), alpha(0.1)).unwrap(),
        ];
        for st in states {
            let back = CalibrationState::from_json(&st.to_json().unwrap()).unwrap();
            assert_eq!(back, st);
            for q in [[0.1, 0.2], [0.8, 0.5]] {
                assert_eq!(back.predict_interval(&q, 1.0).unwrap(), st.predict_interval(&q, 1.0).unwrap());
            }
        }
        let doc = calibrate_split(&p, &y, alpha(0.1)).unwrap().to_json().unwrap();
        let bumped = doc.replace("\"version\": 1", "\"version\": 99");
        assert!(matches!(CalibrationState::from_json(&bumped), Err(Error::StateVersion(99))));
    }

    #[test]
    fn batch_matches_singles() {
        let (emb, p, y) = instance(50, 1, 41);
        let st = calibrate_jkplus(&emb, &p, &y, &KernelSpec::knn(5), alpha(0.1)).unwrap();
        let (temb, tp, _) = instance(30, 1, 42);
        let batch = st.predict_batch(&temb, &tp).unwrap();
        for i in 0..30 {
            assert_eq!(batch[i], st.predict_interval(temb.row(i), tp[i]).unwrap());
        }
        let one = st.predict_batch(&temb.select_rows(&[3]), &tp[3..4]).unwrap();
        assert_eq!(one[0], batch[3]);
        assert!(st.predict_interval(&[0.1, 0.2], 0.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn permutation_leaves_widths_unchanged(seed: u64, n in 5usize..40, k in 1usize..8, use_rbf: bool) {
            let (emb, p, y) = instance(n, 2, seed);
            let kernel = if use_rbf { KernelSpec::rbf(0.25) } else { KernelSpec::knn(k) };
            let a = calibrate_jkplus(&emb, &p, &y, &kernel, alpha(0.2)).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.rotate_left((seed % n as u64) as usize);
            perm.swap(0, n - 1);
            let pe = emb.select_rows(&perm);
            let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
            let py: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
            let b = calibrate_jkplus(&pe, &pp, &py, &kernel, alpha(0.2)).unwrap();
            for q in [[0.1, 0.9], [0.5, 0.5], [0.77, 0.01]] {
                prop_assert_eq!(a.predict_interval(&q, 0.0).unwrap().half_width, b.predict_interval(&q, 0.0).unwrap().half_width);
            }
        }

        #[test]
        fn widths_monotone_in_alpha(seed: u64, n in 5usize..40) {
            let (emb, p, y) = instance(n, 1, seed);
            let st = calibrate_jkplus(&emb, &p, &y, &KernelSpec::knn(4), alpha(0.05)).unwrap();
            let mut prev = f64::INFINITY;
            for a in [0.01, 0.05, 0.1, 0.2, 0.4, 0.7] {
                let w = st.with_alpha(alpha(a)).predict_interval(&[0.3], 0.0).unwrap().half_width;
                prop_assert!(w <= prev);
                prev = w;
            }
        }

        #[test]
        fn scale_equivariance(seed: u64, n in 5usize..40, pow in -3i32..4) {
            let c = 2f64.powi(pow);
            let (emb, p, y) = instance(n, 1, seed);
            let ps: Vec<f64> = p.iter().map(|v| v * c).collect();
            let ys: Vec<f64> = y.iter().map(|v| v * c).collect();
            let (temb, _, _) = instance(8, 1, seed ^ 1);
            let terr: Vec<f64> = (0..8).map(|i| 0.1 + i as f64 * 0.05).collect();
            let terr_s: Vec<f64> = terr.iter().map(|v| v * c).collect();
            let pairs = [
                (calibrate_jkplus(&emb, &p, &y, &KernelSpec::knn(3), alpha(0.2)).unwrap(),
                 calibrate_jkplus(&emb, &ps, &ys, &KernelSpec::knn(3), alpha(0.2)).unwrap()),
                (calibrate_split(&p, &y, alpha(0.2)).unwrap(), calibrate_split(&ps, &ys, alpha(0.2)).unwrap()),
                (calibrate_madsplit(&temb, &terr, &emb, &p, &y, &KernelSpec::knn(3), alpha(0.2)).unwrap(),
                 calibrate_madsplit(&temb, &terr_s, &emb, &ps, &ys, &KernelSpec::knn(3), alpha(0.2)).unwrap()),
            ];
            for (a, b) in pairs {
                for q in [0.1, 0.5, 0.93] {
                    let wa = a.predict_interval(&[q], 0.0).unwrap().half_width;
                    let wb = b.predict_interval(&[q], 0.0).unwrap().half_width;
                    prop_assert_eq!(wa * c, wb);
                }
            }
        }

        #[test]
        fn flat_kernel_equal_scores_reduce_to_split(seed: u64, n in 5usize..30, v in 0.01f64..3.0) {
            let (emb, p, _) = instance(n, 1, seed);
            let y: Vec<f64> = p.iter().map(|p| p + v).collect();
            let split = calibrate_split(&p, &y, alpha(0.2)).unwrap().predict_interval(&[], 0.0).unwrap().half_width;
            let jk = calibrate_jkplus(&emb, &p, &y, &KernelSpec::rbf(1e9), alpha(0.2)).unwrap();
            let md = calibrate_madsplit(&emb, &vec![v; n], &emb, &p, &y, &KernelSpec::rbf(1e9), alpha(0.2)).unwrap();
            for q in [0.2, 0.8] {
                prop_assert!((jk.predict_interval(&[q], 0.0).unwrap().half_width - split).abs() <= 1e-12 * split);
                prop_assert!((md.predict_interval(&[q], 0.0).unwrap().half_width - split).abs() <= 1e-12 * split);
            }
        }
    }
}
