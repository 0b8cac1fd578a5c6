//! Kernels and Nadaraya-Watson conditional means.
//!
//! Two kernel families are supported: the KNN indicator kernel (1 if the
//! reference is among the `k` nearest admissible points of the query, ties at
//! the `k`-th distance included) and the isotropic RBF kernel
//! `exp(-|q - r|^2 / l^2)`.
//!
//! The reference functions [`nw_weights`] and [`leave_two_out_mean`] evaluate
//! weights directly. [`LeaveTwoOut`] and [`held_out_means_at`] compute the same
//! quantities in bulk for the calibration and prediction paths.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{sq_dist, Matrix};
use crate::neighbors::NeighborIndex;

/// An evaluable kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelKind {
    Knn { k: usize },
    Rbf { length_scale: f64 },
}

impl KernelKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelKind::Knn { k: 0 } => Err(Error::invalid("k", "KNN kernel needs k >= 1")),
            KernelKind::Rbf { length_scale } if !(length_scale > 0.0 && length_scale.is_finite()) => {
                Err(Error::invalid(
                    "length_scale",
                    format!("{length_scale} is not a positive finite number"),
                ))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelKind::Knn { k } => write!(f, "knn:{k}"),
            KernelKind::Rbf { length_scale } => write!(f, "rbf:{length_scale}"),
        }
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    /// Parses `knn:<k>` or `rbf:<length scale>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid("kernel", format!("`{s}` is not knn:<k> or rbf:<scale>"));
        let (name, arg) = s.split_once(':').ok_or_else(bad)?;
        let kind = match name {
            "knn" => KernelKind::Knn {
                k: arg.parse().map_err(|_| bad())?,
            },
            "rbf" => KernelKind::Rbf {
                length_scale: arg.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// Declarative kernel description, optionally with one RBF length scale per
/// calibration point.
///
/// A per-point scale `l_m` belongs to calibration point `m` and is used
/// whenever `m` is the held-out point of a leave-two-out mean; see
/// [`KernelSpec::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_point_scales: Option<Vec<f64>>,
}

impl KernelSpec {
    pub fn knn(k: usize) -> Self {
        Self {
            kind: KernelKind::Knn { k },
            per_point_scales: None,
        }
    }

    pub fn rbf(length_scale: f64) -> Self {
        Self {
            kind: KernelKind::Rbf { length_scale },
            per_point_scales: None,
        }
    }

    /// RBF kernel with a tuned length scale per calibration point.
    pub fn rbf_per_point(scales: Vec<f64>) -> Result<Self> {
        let fallback = scales.first().copied().unwrap_or(1.0);
        let spec = Self {
            kind: KernelKind::Rbf {
                length_scale: fallback,
            },
            per_point_scales: Some(scales),
        };
        spec.validate(None)?;
        Ok(spec)
    }

    pub fn validate(&self, n_points: Option<usize>) -> Result<()> {
        self.kind.validate()?;
        if let Some(scales) = &self.per_point_scales {
            if !matches!(self.kind, KernelKind::Rbf { .. }) {
                return Err(Error::invalid(
                    "per_point_scales",
                    "per-point scales require an RBF kernel",
                ));
            }
            if let Some(bad) = scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
                return Err(Error::invalid("per_point_scales", format!("{bad} is not positive")));
            }
            if let Some(n) = n_points {
                if scales.len() != n {
                    return Err(Error::LengthMismatch {
                        what: "per_point_scales",
                        expected: n,
                        got: scales.len(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Kernel used for the mean at `query` with calibration point `held_out`
    /// removed: the held-out point's own scale when one exists, otherwise the
    /// query's, otherwise the base kernel.
    pub fn resolve(&self, query: usize, held_out: usize) -> KernelKind {
        match (&self.kind, &self.per_point_scales) {
            (KernelKind::Rbf { .. }, Some(scales)) => {
                let l = scales
                    .get(held_out)
                    .or_else(|| scales.get(query))
                    .copied();
                match l {
                    Some(length_scale) => KernelKind::Rbf { length_scale },
                    None => self.kind,
                }
            }
            _ => self.kind,
        }
    }

    /// Reorder per-point scales along with a permutation of the points.
    pub(crate) fn permuted(&self, order: &[usize]) -> Self {
        Self {
            kind: self.kind,
            per_point_scales: self
                .per_point_scales
                .as_ref()
                .map(|s| order.iter().map(|&i| s[i]).collect()),
        }
    }
}

#[inline]
pub fn rbf(length_scale: f64, sq_distance: f64) -> f64 {
    (-sq_distance / (length_scale * length_scale)).exp()
}

/// Kernel value between a query and one reference point of `index`.
///
/// For KNN this is the indicator that `reference_index` is among the `k`
/// nearest points of `index` to the query once `exclusions` are removed.
pub fn kernel_value(
    kind: &KernelKind,
    query: &[f64],
    reference: &[f64],
    index: &NeighborIndex,
    reference_index: usize,
    exclusions: &[usize],
) -> Result<f64> {
    if query.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.len(),
            got: query.len(),
        });
    }
    kind.validate()?;
    Ok(match *kind {
        KernelKind::Rbf { length_scale } => rbf(length_scale, sq_dist(query, reference)),
        KernelKind::Knn { k } => {
            let nn = index.knn_with_ties(query, k, |j| exclusions.contains(&j));
            if nn.iter().any(|n| n.1 == reference_index) {
                1.0
            } else {
                0.0
            }
        }
    })
}

/// Normalized Nadaraya-Watson weights at an arbitrary query over the rows of
/// `points` not listed in `exclusions`. Excluded entries are exactly zero.
pub fn nw_weights_at(
    kind: &KernelKind,
    query: &[f64],
    exclusions: &[usize],
    points: &Matrix,
) -> Result<Vec<f64>> {
    if query.len() != points.cols() {
        return Err(Error::DimensionMismatch {
            expected: points.cols(),
            got: query.len(),
        });
    }
    kind.validate()?;
    let n = points.rows();
    let admissible = |j: usize| !exclusions.contains(&j);
    let mut w = vec![0.0; n];
    match *kind {
        KernelKind::Rbf { length_scale } => {
            for (j, wj) in w.iter_mut().enumerate() {
                if admissible(j) {
                    *wj = rbf(length_scale, sq_dist(query, points.row(j)));
                }
            }
        }
        KernelKind::Knn { k } => {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| admissible(j))
                .map(|j| (sq_dist(query, points.row(j)), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if let Some(&(dk, _)) = d.get(k.min(d.len()).wrapping_sub(1)) {
                for &(dj, j) in &d {
                    if dj <= dk {
                        w[j] = 1.0;
                    }
                }
            }
        }
    }
    let total: f64 = w.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::DegenerateKernel { query: usize::MAX });
    }
    for wj in &mut w {
        *wj /= total;
    }
    Ok(w)
}

/// Weights `p_ik` for query row `i`, normalized over the non-excluded rows.
/// `exclusions` must contain `i`.
pub fn nw_weights(
    kind: &KernelKind,
    i: usize,
    exclusions: &[usize],
    points: &Matrix,
) -> Result<Vec<f64>> {
    if !exclusions.contains(&i) {
        return Err(Error::invalid("exclusions", "must contain the query index"));
    }
    nw_weights_at(kind, points.row(i), exclusions, points).map_err(|e| match e {
        Error::DegenerateKernel { .. } => Error::DegenerateKernel { query: i },
        other => other,
    })
}

/// Nadaraya-Watson mean of `scores` at row `i` with rows `i` and `j` removed
/// from both the support and the normalization.
pub fn leave_two_out_mean(
    spec: &KernelSpec,
    i: usize,
    j: usize,
    points: &Matrix,
    scores: &[f64],
) -> Result<f64> {
    if i == j {
        return Err(Error::invalid("j", "leave-two-out needs distinct indices"));
    }
    if scores.len() != points.rows() {
        return Err(Error::LengthMismatch {
            what: "scores",
            expected: points.rows(),
            got: scores.len(),
        });
    }
    let w = nw_weights(&spec.resolve(i, j), i, &[i, j], points)?;
    Ok(w.iter().zip(scores).map(|(w, s)| w * s).sum())
}

/// Relative size below which a sum left after subtracting one point's
/// contribution is recomputed directly. At most one point can hold more than
/// half of a sum, so the slow path runs at most once per query and sum.
const CANCELLATION_GUARD: f64 = 1e-3;

/// Mean of `scores` over `members`, summed in ascending index order.
fn mean_of(scores: &[f64], members: &mut [usize]) -> f64 {
    members.sort_unstable();
    members.iter().map(|&j| scores[j]).sum::<f64>() / members.len() as f64
}

/// Among a `(distance, index)` list sorted ascending, the members of the
/// ties-inclusive `k`-nearest set after dropping `drop`.
fn knn_members(list: &[(f64, usize)], k: usize, drop: Option<usize>) -> Vec<usize> {
    let kept: Vec<&(f64, usize)> = list.iter().filter(|n| Some(n.1) != drop).collect();
    if kept.is_empty() {
        return Vec::new();
    }
    let dk = kept[k.min(kept.len()) - 1].0;
    kept.iter().filter(|n| n.0 <= dk).map(|n| n.1).collect()
}

/// Held-out Nadaraya-Watson means over one point set with a single kernel.
///
/// `loo_mean(i)` removes `i`; `l2o_mean(i, j)` removes `i` and `j`. For KNN the
/// `k + 1` nearest neighbors (with ties) of each point are cached, so
/// removing `j` only promotes the next neighbor. For RBF the full kernel row
/// sums are cached and the removed point's mass is subtracted.
pub struct LeaveTwoOut<'a> {
    kind: KernelKind,
    points: &'a Matrix,
    scores: &'a [f64],
    knn_lists: Vec<Vec<(f64, usize)>>,
    rbf_sums: Vec<(f64, f64)>,
    total: f64,
}

impl<'a> LeaveTwoOut<'a> {
    pub fn new(kind: KernelKind, points: &'a Matrix, scores: &'a [f64], index: &NeighborIndex) -> Self {
        let n = points.rows();
        let mut knn_lists = Vec::new();
        let mut rbf_sums = Vec::new();
        match kind {
            KernelKind::Knn { k } => {
                knn_lists = (0..n)
                    .into_par_iter()
                    .map(|i| index.knn_with_ties(points.row(i), k + 1, |j| j == i))
                    .collect();
            }
            KernelKind::Rbf { length_scale } => {
                rbf_sums = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let q = points.row(i);
                        let (mut a, mut b) = (0.0, 0.0);
                        for j in (0..n).filter(|&j| j != i) {
                            let w = rbf(length_scale, sq_dist(q, points.row(j)));
                            a += w * scores[j];
                            b += w;
                        }
                        (a, b)
                    })
                    .collect();
            }
        }
        Self {
            kind,
            points,
            scores,
            knn_lists,
            rbf_sums,
            total: scores.iter().sum(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    /// Mean at `i` over all other points.
    pub fn loo_mean(&self, i: usize) -> Result<f64> {
        match self.kind {
            KernelKind::Knn { k } => {
                let mut m = knn_members(&self.knn_lists[i], k, None);
                if m.is_empty() {
                    return Err(Error::DegenerateKernel { query: i });
                }
                Ok(mean_of(self.scores, &mut m))
            }
            KernelKind::Rbf { .. } => {
                let (a, b) = self.rbf_sums[i];
                if b > 0.0 {
                    Ok(a / b)
                } else {
                    Err(Error::DegenerateKernel { query: i })
                }
            }
        }
    }

    /// Mean at `i` over all points except `i` and `j`.
    pub fn l2o_mean(&self, i: usize, j: usize) -> Result<f64> {
        debug_assert_ne!(i, j);
        match self.kind {
            KernelKind::Knn { k } => {
                let list = &self.knn_lists[i];
                let full = knn_members(list, k, None);
                let mut m = if full.contains(&j) {
                    knn_members(list, k, Some(j))
                } else {
                    full
                };
                if m.is_empty() {
                    return Err(Error::DegenerateKernel { query: i });
                }
                Ok(mean_of(self.scores, &mut m))
            }
            KernelKind::Rbf { length_scale } => {
                let (a, b) = self.rbf_sums[i];
                let wj = rbf(length_scale, sq_dist(self.points.row(i), self.points.row(j)));
                let den = b - wj;
                let num = a - wj * self.scores[j];
                if den > CANCELLATION_GUARD * b && num >= CANCELLATION_GUARD * a {
                    return Ok(num / den);
                }
                let q = self.points.row(i);
                let (mut a, mut b) = (0.0, 0.0);
                for l in (0..self.len()).filter(|&l| l != i && l != j) {
                    let w = rbf(length_scale, sq_dist(q, self.points.row(l)));
                    a += w * self.scores[l];
                    b += w;
                }
                if b > 0.0 {
                    Ok(a / b)
                } else {
                    Err(Error::DegenerateKernel { query: i })
                }
            }
        }
    }

    /// Uniform mean over the admissible set, the fallback for a vanishing
    /// kernel.
    pub fn uniform_mean(&self, excluded: &[usize]) -> f64 {
        let n = self.len() - excluded.len();
        let s: f64 = excluded.iter().map(|&e| self.scores[e]).sum();
        (self.total - s) / n as f64
    }
}

/// Result of one held-out mean: the value and whether the uniform fallback
/// was applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeldOut {
    pub mean: f64,
    pub fallback: bool,
}

/// For an external query, the Nadaraya-Watson mean of `scores` over the
/// calibration points with point `i` removed, for every `i`.
///
/// The kernel for held-out point `i` is `spec.resolve(n, i)`.
pub fn held_out_means_at(
    spec: &KernelSpec,
    query: &[f64],
    points: &Matrix,
    index: &NeighborIndex,
    scores: &[f64],
) -> Vec<HeldOut> {
    let n = points.rows();
    let total: f64 = scores.iter().sum();
    let uniform = |i: usize| HeldOut {
        mean: (total - scores[i]) / (n - 1) as f64,
        fallback: true,
    };
    match (&spec.kind, &spec.per_point_scales) {
        (KernelKind::Knn { k }, _) => {
            let list = index.knn_with_ties(query, k + 1, |_| false);
            let mut full = knn_members(&list, *k, None);
            let full_mean = mean_of(scores, &mut full);
            (0..n)
                .map(|i| {
                    let mean = if full.binary_search(&i).is_ok() {
                        let mut m = knn_members(&list, *k, Some(i));
                        mean_of(scores, &mut m)
                    } else {
                        full_mean
                    };
                    HeldOut {
                        mean,
                        fallback: false,
                    }
                })
                .collect()
        }
        (KernelKind::Rbf { length_scale }, scales) => {
            let d2: Vec<f64> = points.iter_rows().map(|r| sq_dist(query, r)).collect();
            // Distinct scales in ascending order; one pass of sums per scale.
            let mut distinct: Vec<f64> = match scales {
                Some(s) => s.clone(),
                None => vec![*length_scale],
            };
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            let sums: Vec<(f64, f64)> = distinct
                .iter()
                .map(|&l| {
                    d2.iter().zip(scores).fold((0.0, 0.0), |(a, b), (&d, &s)| {
                        let w = rbf(l, d);
                        (a + w * s, b + w)
                    })
                })
                .collect();
            (0..n)
                .map(|i| {
                    let l = match scales {
                        Some(s) => s[i],
                        None => *length_scale,
                    };
                    let g = distinct.partition_point(|&x| x < l);
                    let (a, b) = sums[g];
                    let wi = rbf(l, d2[i]);
                    let den = b - wi;
                    let num = a - wi * scores[i];
                    if den > CANCELLATION_GUARD * b && num >= CANCELLATION_GUARD * a {
                        return HeldOut {
                            mean: num / den,
                            fallback: false,
                        };
                    }
                    let (mut a, mut b) = (0.0, 0.0);
                    for j in (0..n).filter(|&j| j != i) {
                        let w = rbf(l, d2[j]);
                        a += w * scores[j];
                        b += w;
                    }
                    if b > 0.0 {
                        HeldOut {
                            mean: a / b,
                            fallback: false,
                        }
                    } else {
                        uniform(i)
                    }
                })
                .collect()
        }
    }
}

/// Nadaraya-Watson mean of `values` at an external query with no exclusions.
pub fn nw_mean_at(
    kind: &KernelKind,
    query: &[f64],
    points: &Matrix,
    index: &NeighborIndex,
    values: &[f64],
) -> HeldOut {
    match *kind {
        KernelKind::Knn { k } => {
            let mut m: Vec<usize> = index
                .knn_with_ties(query, k, |_| false)
                .into_iter()
                .map(|n| n.1)
                .collect();
            HeldOut {
                mean: mean_of(values, &mut m),
                fallback: false,
            }
        }
        KernelKind::Rbf { length_scale } => {
            let (a, b) = points
                .iter_rows()
                .zip(values)
                .fold((0.0, 0.0), |(a, b), (r, &v)| {
                    let w = rbf(length_scale, sq_dist(query, r));
                    (a + w * v, b + w)
                });
            if b > 0.0 {
                HeldOut {
                    mean: a / b,
                    fallback: false,
                }
            } else {
                HeldOut {
                    mean: values.iter().sum::<f64>() / values.len() as f64,
                    fallback: true,
                }
            }
        }
    }
}
