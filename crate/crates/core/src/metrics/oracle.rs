use statrs::function::erf::erf;

use crate::data::RiskLevel;
use crate::error::{Error, Result};

/// `x` with `cdf(x) = target` for a continuous increasing `cdf` on `[0, inf)`.
fn bisect(cdf: impl Fn(f64) -> f64, target: f64) -> Result<f64> {
    let mut hi = 1.0;
    let mut grow = 0;
    while cdf(hi) < target {
        hi *= 2.0;
        grow += 1;
        if grow > 1100 {
            return Err(Error::NoConvergence(format!("no upper bracket for level {target}")));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Ok(mid);
        }
        if cdf(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if hi - lo <= 1e-12 * hi {
        Ok(0.5 * (lo + hi))
    } else {
        Err(Error::NoConvergence(format!("bracket [{lo}, {hi}] for level {target}")))
    }
}

/// Ratio of the mean size of a perfectly adaptive interval to the size of a
/// flat interval, for absolute errors drawn from a two-scale half-normal
/// mixture: weight `beta` at scale 1 and `1 - beta` at scale `lambda`.
pub fn oracle_is_ratio(beta: f64, lambda: f64, alpha: RiskLevel) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::invalid("beta", format!("{beta} is not in (0, 1)")));
    }
    if !(lambda >= 1.0 && lambda.is_finite()) {
        return Err(Error::invalid("lambda", format!("{lambda} is not a finite number >= 1")));
    }
    if lambda == 1.0 {
        return Ok(1.0);
    }
    let target = 1.0 - alpha.get();
    let s2 = std::f64::consts::SQRT_2;
    let q_half = bisect(|x| erf(x / s2), target)?;
    let q_mix = bisect(|x| beta * erf(x / s2) + (1.0 - beta) * erf(x / (lambda * s2)), target)?;
    Ok(q_half * (beta + (1.0 - beta) * lambda) / q_mix)
}
