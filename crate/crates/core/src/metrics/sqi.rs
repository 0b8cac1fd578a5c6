use serde::{Deserialize, Serialize};

use crate::data::RiskLevel;
use crate::error::{Error, Result};

use super::kendall_tau;

/// One interval-size quantile bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqiBin {
    pub lower: f64,
    pub upper: f64,
    /// Midpoint of the bin edges.
    pub isq: f64,
    /// Plain `(1 - alpha)` order statistic of the scores in the bin.
    pub csq: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqiBins {
    pub bins: Vec<SqiBin>,
    pub requested: usize,
    /// True when sparse bins were merged into neighbors.
    pub merged: bool,
}

/// Linear-interpolation quantile of sorted data at probability `p`.
fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    if lo + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[lo] + (h - lo as f64) * (v[lo + 1] - v[lo])
}

/// Bins points by interval-size quantiles and summarizes the score
/// distribution of each bin.
///
/// Bin `d` holds sizes in `[e_d, e_{d+1})` (the last bin is closed), with
/// `e_d` the `d / n_bins` quantile of the sizes. Bins holding fewer than
/// `min(2, n / n_bins)` points are merged left to right into the next bin;
/// a short tail merges into the previous group.
pub fn sqi_bins(sizes: &[f64], scores: &[f64], alpha: RiskLevel, n_bins: usize) -> Result<SqiBins> {
    if sizes.len() != scores.len() {
        return Err(Error::LengthMismatch {
            what: "scores",
            expected: sizes.len(),
            got: scores.len(),
        });
    }
    if n_bins == 0 {
        return Err(Error::invalid("n_bins", "must be at least 1"));
    }
    let n = sizes.len();
    if n < n_bins {
        return Err(Error::invalid("n_bins", format!("{n} points cannot fill {n_bins} bins")));
    }
    if sizes.iter().chain(scores).any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite interval size or score".into()));
    }
    let mut sorted = sizes.to_vec();
    sorted.sort_by(f64::total_cmp);
    let edges: Vec<f64> = (0..=n_bins)
        .map(|i| quantile_sorted(&sorted, i as f64 / n_bins as f64))
        .collect();
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
    for (&v, &s) in sizes.iter().zip(scores) {
        // Largest d with e_d <= v.
        let d = edges[1..n_bins].partition_point(|&e| e <= v);
        members[d].push(s);
    }

    let threshold = 2.min(n / n_bins).max(1);
    let mut groups: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    let mut open: Option<(usize, Vec<f64>)> = None;
    for (d, m) in members.into_iter().enumerate() {
        let (start, mut acc) = open.take().unwrap_or((d, Vec::new()));
        acc.extend(m);
        if acc.len() >= threshold {
            groups.push((start, d, acc));
        } else {
            open = Some((start, acc));
        }
    }
    if let Some((_, rest)) = open {
        match groups.last_mut() {
            Some(last) => {
                last.1 = n_bins - 1;
                last.2.extend(rest);
            }
            None => groups.push((0, n_bins - 1, rest)),
        }
    }
    let merged = groups.len() < n_bins;
    if merged {
        log::warn!("interval-size bins: {} of {n_bins} remain after merging sparse bins", groups.len());
    }
    let a = alpha.get();
    let bins = groups
        .into_iter()
        .map(|(start, end, mut s)| {
            s.sort_by(f64::total_cmp);
            let m = s.len();
            let rank = (((1.0 - a) * m as f64) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
            let (lower, upper) = (edges[start], edges[end + 1]);
            SqiBin {
                lower,
                upper,
                isq: 0.5 * (lower + upper),
                csq: s[rank.min(m) - 1],
                count: m,
            }
        })
        .collect();
    Ok(SqiBins {
        bins,
        requested: n_bins,
        merged,
    })
}

/// Fit quality of the fixed model `ISQ = 2 CSQ`; NaN when ISQ is constant.
pub fn r2_sqi(bins: &SqiBins) -> f64 {
    let b = &bins.bins;
    if b.len() < 2 {
        return f64::NAN;
    }
    let mean = b.iter().map(|x| x.isq).sum::<f64>() / b.len() as f64;
    let total: f64 = b.iter().map(|x| (x.isq - mean).powi(2)).sum();
    if total == 0.0 {
        return f64::NAN;
    }
    let resid: f64 = b.iter().map(|x| (x.isq - 2.0 * x.csq).powi(2)).sum();
    1.0 - resid / total
}

/// Kendall correlation between bin rank and per-bin score quantile.
pub fn tau_sqi(bins: &SqiBins) -> Result<f64> {
    if bins.bins.len() < 2 {
        log::warn!("tau_sqi undefined with fewer than 2 bins, reporting 0");
        return Ok(0.0);
    }
    let rank: Vec<f64> = (0..bins.bins.len()).map(|i| i as f64).collect();
    let csq: Vec<f64> = bins.bins.iter().map(|b| b.csq).collect();
    kendall_tau(&rank, &csq)
}

/// Text form of an R^2 value: "≪ 0" below -2, "nan" when undefined.
pub fn render_r2(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v < -2.0 {
        "≪ 0".into()
    } else {
        format!("{v:.3}")
    }
}
