use serde::{Deserialize, Serialize};

use crate::conformal::conformal_rank;
use crate::data::RiskLevel;
use crate::error::{Error, Result};

/// Effective miscoverage on an input subset of probability `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageBound {
    /// `alpha + sqrt(1 - exp(-mi)) / rho`, capped at 1.
    pub alpha_bar: f64,
    /// Looser variant `alpha + sqrt(mi) / rho`, capped at 1.
    pub alpha_bar_sqrt_mi: f64,
}

pub fn local_coverage_bound(mi: f64, rho: f64, alpha: RiskLevel) -> Result<CoverageBound> {
    if !(mi >= 0.0 && mi.is_finite()) {
        return Err(Error::invalid("mi", format!("{mi} is not a finite non-negative number")));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::invalid("rho", format!("{rho} is not in (0, 1]")));
    }
    let a = alpha.get();
    Ok(CoverageBound {
        alpha_bar: (a + (-(-mi).exp_m1()).sqrt() / rho).min(1.0),
        alpha_bar_sqrt_mi: (a + mi.sqrt() / rho).min(1.0),
    })
}

/// Miscoverage actually certified by `n` calibration points at level `alpha`:
/// `1 - ceil((1 - alpha)(n + 1)) / (n + 1)`, floored at 0.
pub fn finite_sample_alpha(alpha: RiskLevel, n: usize) -> f64 {
    let q = conformal_rank(n, alpha) as f64;
    (1.0 - q / (n + 1) as f64).max(0.0)
}

/// Markov lower bound on `P(s+ <= q)` for rescaled scores of unit mean.
pub fn markov_coverage(q: f64) -> Result<f64> {
    if q.is_nan() || q <= 0.0 {
        return Err(Error::invalid("q", format!("{q} is not positive")));
    }
    Ok((1.0 - 1.0 / q).max(0.0))
}

/// Cantelli threshold on rescaled scores guaranteeing miscoverage at most
/// `alpha` given their coefficient of variation.
pub fn cantelli_threshold(cv: f64, alpha: RiskLevel) -> Result<f64> {
    if !(cv >= 0.0 && cv.is_finite()) {
        return Err(Error::invalid("cv", format!("{cv} is not a finite non-negative number")));
    }
    let a = alpha.get();
    Ok(1.0 + cv * ((1.0 - a) / a).sqrt())
}
