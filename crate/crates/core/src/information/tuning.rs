use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mi_objective;
use crate::error::{Error, Result};
use crate::kernels::{KernelKind, KernelSpec, LeaveTwoOut};
use crate::matrix::{sq_dist, Matrix};
use crate::neighbors::NeighborIndex;
use crate::rng::Stream;

const PAIR_STREAM: u64 = 0x7475_6e65;
const SUBSAMPLE_STREAM: u64 = 0x7375_6273;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningParams {
    pub n_pca: usize,
    /// Number of sampled pairs; `None` means `min(1000, N(N-1)/2)`.
    pub n_sample: Option<usize>,
    pub n_scan: usize,
    pub beta_expand: f64,
    /// Neighbors used by the KSG estimator.
    pub k: usize,
    /// Upper bound on the points entering each MI estimate.
    pub mi_subsample: usize,
    pub seed: u64,
}

impl Default for TuningParams {
    fn default() -> Self {
        Self {
            n_pca: 3,
            n_sample: None,
            n_scan: 16,
            beta_expand: 3.0,
            k: 3,
            mi_subsample: 2000,
            seed: 0,
        }
    }
}

impl TuningParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_expand >= 1.0 && self.beta_expand.is_finite()) {
            return Err(Error::invalid("beta_expand", "must be a finite number >= 1"));
        }
        if self.n_scan < 2 {
            return Err(Error::invalid("n_scan", "must be at least 2"));
        }
        if self.n_pca == 0 {
            return Err(Error::invalid("n_pca", "must be at least 1"));
        }
        if self.k == 0 {
            return Err(Error::invalid("k", "must be at least 1"));
        }
        if self.n_sample == Some(0) {
            return Err(Error::invalid("n_sample", "must be at least 1"));
        }
        if self.mi_subsample <= self.k {
            return Err(Error::invalid("mi_subsample", "must exceed k"));
        }
        Ok(())
    }
}

/// Per-point RBF scales plus the full scan used to choose them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    /// Per-point RBF kernel, scales aligned with the input rows.
    pub kernel: KernelSpec,
    /// Scanned length scales, ascending.
    pub grid: Vec<f64>,
    /// `mi[n][m]`: objective at scale `grid[n]` with point `m` left out.
    pub mi: Vec<Vec<f64>>,
    /// Selected grid index per input row.
    pub selected: Vec<usize>,
    pub d_min: f64,
    pub d_max: f64,
    pub n_pairs: usize,
}

impl TuningResult {
    /// Mean objective over leave-outs at each scale.
    pub fn mean_curve(&self) -> Vec<f64> {
        self.mi.iter().map(|row| order_free_mean(row.iter().copied())).collect()
    }

    /// Mean over leave-outs of the objective at each point's selected scale.
    pub fn tuned_objective(&self) -> f64 {
        order_free_mean((0..self.selected.len()).map(|m| self.mi[self.selected[m]][m]))
    }

    /// Grid index minimizing the mean curve (first on ties).
    pub fn curve_argmin(&self) -> usize {
        argmin(&self.mean_curve())
    }

    pub fn has_interior_minimum(&self) -> bool {
        let a = self.curve_argmin();
        a > 0 && a + 1 < self.grid.len()
    }

    /// Writes `scale,mean_mi` rows.
    pub fn write_diagnostics_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "scale,mean_mi")?;
        for (l, m) in self.grid.iter().zip(self.mean_curve()) {
            writeln!(f, "{l},{m}")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Mean summed in sorted order, so it does not depend on row order.
fn order_free_mean(v: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = v.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.total_cmp(&v[best]).is_lt() {
            best = i;
        }
    }
    best
}

fn abs_errors(predictions: &[f64], labels: &[f64], rows: usize) -> Result<Vec<f64>> {
    if predictions.len() != rows || labels.len() != rows {
        return Err(Error::LengthMismatch {
            what: "calibration predictions/labels",
            expected: rows,
            got: predictions.len().min(labels.len()),
        });
    }
    Ok(predictions.iter().zip(labels).map(|(p, y)| (y - p).abs()).collect())
}

/// Canonical order by (embedding, score) so results ignore input order.
fn canonical(points: &Matrix, scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.rows()).collect();
    order.sort_by(|&a, &b| {
        points
            .row(a)
            .iter()
            .zip(points.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(scores[a].total_cmp(&scores[b]))
    });
    order
}

/// Fixed per-run subsample of rows that enter each MI estimate.
fn subsample(n: usize, size: usize, seed: u64) -> Vec<usize> {
    if size + 1 >= n {
        return (0..n).collect();
    }
    let mut p = Stream::new(seed, SUBSAMPLE_STREAM).permutation(n);
    p.truncate(size + 1);
    p.sort_unstable();
    p
}

/// Objective for each left-out point `m`: MI between the rows of `points`
/// and their rescaled scores `s_i / mean_{not i, not m}`.
fn leave_out_objectives(
    kind: KernelKind,
    points: &Matrix,
    scores: &[f64],
    index: &NeighborIndex,
    rows: &[usize],
    params: &TuningParams,
) -> Result<Vec<f64>> {
    let n = points.rows();
    let floor = 1e-12 * scores.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let floor = if scores.iter().all(|s| *s == 0.0) { 1e-12 } else { floor };
    let table = LeaveTwoOut::new(kind, points, scores, index);
    let budget = params.mi_subsample.min(n - 1);
    (0..n)
        .into_par_iter()
        .map(|m| {
            let members: Vec<usize> = rows.iter().copied().filter(|&i| i != m).take(budget).collect();
            let plus: Vec<f64> = members
                .iter()
                .map(|&i| {
                    let mean = table
                        .l2o_mean(i, m)
                        .unwrap_or_else(|_| table.uniform_mean(&[i, m]));
                    scores[i] / mean.max(floor)
                })
                .collect();
            mi_objective(&points.select_rows(&members), &plus, params.n_pca, params.k)
        })
        .collect()
}

fn sample_pairs(points: &Matrix, n_sample: usize, seed: u64) -> Result<Vec<f64>> {
    let n = points.rows();
    let total = n * (n - 1) / 2;
    let dist = |a: usize, b: usize| sq_dist(points.row(a), points.row(b)).sqrt();
    let mut out = Vec::with_capacity(n_sample);
    if n_sample >= total {
        for a in 0..n {
            for b in a + 1..n {
                let d = dist(a, b);
                if d > 0.0 {
                    out.push(d);
                }
            }
        }
    } else {
        let mut rng = Stream::new(seed, PAIR_STREAM);
        let mut seen = BTreeSet::new();
        let max_draws = 50 * n_sample + 1000;
        for _ in 0..max_draws {
            if out.len() == n_sample {
                break;
            }
            let a = rng.below(n);
            let b = rng.below(n);
            let key = (a.min(b), a.max(b));
            if a == b || !seen.insert(key) {
                continue;
            }
            let d = dist(key.0, key.1);
            // Identical inputs carry no scale information; draw again.
            if d > 0.0 {
                out.push(d);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Degenerate("all sampled calibration inputs are identical".into()));
    }
    Ok(out)
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| {
            if i + 1 == n {
                hi
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

/// Per-point RBF length-scale selection by leave-one-out MI minimization.
///
/// Every grid scale is applied to all points at once; for each left-out point
/// `m` the rescaled scores `s_i / mean_{not i, not m}` of the other points are
/// scored with [`mi_objective`], and `m` keeps the scale with the smallest
/// value (smallest scale on ties).
pub fn tune_kernel(
    cal_embeddings: &Matrix,
    cal_predictions: &[f64],
    cal_labels: &[f64],
    params: &TuningParams,
) -> Result<TuningResult> {
    params.validate()?;
    let n = cal_embeddings.rows();
    if n < 4 {
        return Err(Error::invalid("calibration size", format!("tuning needs at least 4 points, got {n}")));
    }
    let raw = abs_errors(cal_predictions, cal_labels, n)?;
    if cal_embeddings.as_slice().iter().chain(&raw).any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite calibration input".into()));
    }
    let order = canonical(cal_embeddings, &raw);
    let points = cal_embeddings.select_rows(&order);
    let scores: Vec<f64> = order.iter().map(|&i| raw[i]).collect();

    let n_sample = params.n_sample.unwrap_or(1000).min(n * (n - 1) / 2);
    let dists = sample_pairs(&points, n_sample, params.seed)?;
    let d_min = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let d_max = dists.iter().copied().fold(0.0, f64::max);
    let grid = log_grid(d_min / params.beta_expand, d_max * params.beta_expand, params.n_scan);

    let index = NeighborIndex::build(&points);
    let rows = subsample(n, params.mi_subsample.min(n - 1), params.seed);
    let mi = grid
        .iter()
        .map(|&l| {
            leave_out_objectives(KernelKind::Rbf { length_scale: l }, &points, &scores, &index, &rows, params)
        })
        .collect::<Result<Vec<_>>>()?;

    let selected_canon: Vec<usize> = (0..n)
        .map(|m| argmin(&mi.iter().map(|row| row[m]).collect::<Vec<_>>()))
        .collect();
    // Back to the caller's row order.
    let mut selected = vec![0; n];
    let mut mi_out = vec![vec![0.0; n]; grid.len()];
    for (c, &orig) in order.iter().enumerate() {
        selected[orig] = selected_canon[c];
        for (g, row) in mi.iter().enumerate() {
            mi_out[g][orig] = row[c];
        }
    }
    let scales = selected.iter().map(|&g| grid[g]).collect();
    Ok(TuningResult {
        kernel: KernelSpec::rbf_per_point(scales)?,
        grid,
        mi: mi_out,
        selected,
        d_min,
        d_max,
        n_pairs: dists.len(),
    })
}

/// Mean over leave-outs of the objective for one fixed kernel, comparable to
/// [`TuningResult::tuned_objective`].
pub fn fixed_kernel_objective(
    cal_embeddings: &Matrix,
    cal_predictions: &[f64],
    cal_labels: &[f64],
    kind: KernelKind,
    params: &TuningParams,
) -> Result<f64> {
    params.validate()?;
    kind.validate()?;
    let n = cal_embeddings.rows();
    if n < 4 {
        return Err(Error::invalid("calibration size", format!("need at least 4 points, got {n}")));
    }
    let raw = abs_errors(cal_predictions, cal_labels, n)?;
    let order = canonical(cal_embeddings, &raw);
    let points = cal_embeddings.select_rows(&order);
    let scores: Vec<f64> = order.iter().map(|&i| raw[i]).collect();
    let index = NeighborIndex::build(&points);
    let rows = subsample(n, params.mi_subsample.min(n - 1), params.seed);
    let v = leave_out_objectives(kind, &points, &scores, &index, &rows, params)?;
    Ok(order_free_mean(v.into_iter()))
}
