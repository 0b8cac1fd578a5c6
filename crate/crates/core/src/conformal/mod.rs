//! Conformal engines and interval assembly.
//!
//! All engines use the absolute error `s_i = |y_i - μ(X_i)|` as the raw
//! score.
//!
//! - **Split**: half-width is the conformal quantile of the raw scores.
//! - **MADSplit**: scores are divided by a kernel mean of *training* absolute
//!   errors at the same input; the half-width is the quantile of the
//!   rescaled scores times that mean at the test input.
//! - **Jackknife+ rescaled**: `s⁺_i = s_i / ŝ_i` where `ŝ_i` is the
//!   Nadaraya-Watson mean of the other calibration scores at `X_i`. For a
//!   test input the engine forms, for every calibration point `i`, the mean
//!   of calibration scores at the test input with `i` removed, multiplies it
//!   by `s⁺_i`, and takes the conformal quantile of those `N` products.
//!
//! Calibration points are stored in a canonical order (lexicographic on
//! embedding, then score) so every reduction, and therefore every interval,
//! is independent of the order in which calibration data was supplied.

mod quantile;
mod state;

pub use quantile::{conformal_quantile, conformal_rank};
pub use state::{
    calibrate_jkplus, calibrate_madsplit, calibrate_split, CalibrationState, Method,
    TrainingErrors, STATE_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::data::RiskLevel;

/// Symmetric interval `center ± half_width`. An infinite half-width is the
/// sentinel for a calibration set too small to certify the requested risk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub center: f64,
    pub half_width: f64,
    pub alpha: RiskLevel,
}

impl PredictionInterval {
    pub fn lower(&self) -> f64 {
        self.center - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.center + self.half_width
    }

    /// Full interval size.
    pub fn size(&self) -> f64 {
        2.0 * self.half_width
    }

    pub fn is_infinite(&self) -> bool {
        self.half_width.is_infinite()
    }

    /// Closed-interval membership.
    pub fn contains(&self, y: f64) -> bool {
        self.lower() <= y && y <= self.upper()
    }
}
