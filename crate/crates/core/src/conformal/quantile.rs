use crate::data::RiskLevel;
use crate::error::{Error, Result};

/// 1-based rank `⌈(1-α)(n+1)⌉` of the conformal order statistic.
///
/// A relative slack of 1e-12 absorbs representation error when `(1-α)(n+1)`
/// is mathematically an integer (e.g. α = 0.05, n = 19).
pub fn conformal_rank(n: usize, alpha: RiskLevel) -> usize {
    let x = (1.0 - alpha.get()) * (n as f64 + 1.0);
    (x - 1e-12 * x).ceil().max(1.0) as usize
}

/// The `⌈(1-α)(n+1)⌉`-th smallest score, or `+∞` when that rank exceeds `n`.
pub fn conformal_quantile(scores: &[f64], alpha: RiskLevel) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("conformal quantile of an empty score list"));
    }
    let rank = conformal_rank(scores.len(), alpha);
    if rank > scores.len() {
        return Ok(f64::INFINITY);
    }
    let mut buf = scores.to_vec();
    let (_, v, _) = buf.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*v)
}
