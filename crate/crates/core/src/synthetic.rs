//! One-dimensional heteroscedastic generator and simple base regressors.
//!
//! `y = f0 + x^2 sin(k_f x + phi_f) + eps`, `x ~ U(0, 1)`, with Gaussian noise
//! whose scale is `lambda * nu(x)`, `nu(x) = eps0 + |sin(k_eps x + phi_eps)|`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::neighbors::NeighborIndex;
use crate::rng::Stream;

const SYNTH_STREAM: u64 = 0x5157_4e54;

/// How `lambda * nu(x)` enters the noise distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    #[default]
    Std,
    Variance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Synth1DParams {
    pub f0: f64,
    pub k_f: f64,
    pub phi_f: f64,
    pub eps0: f64,
    pub k_eps: f64,
    pub phi_eps: f64,
    pub lambda: f64,
    pub noise_scale: NoiseScale,
}

impl Default for Synth1DParams {
    fn default() -> Self {
        Self {
            f0: 0.1,
            k_f: 10.0,
            phi_f: 0.5,
            eps0: 0.01,
            k_eps: 2.0,
            phi_eps: 0.3,
            lambda: 0.1,
            noise_scale: NoiseScale::Std,
        }
    }
}

impl Synth1DParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [self.f0, self.k_f, self.phi_f, self.eps0, self.k_eps, self.phi_eps, self.lambda];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("synthetic", "parameters must be finite"));
        }
        if self.lambda <= 0.0 {
            return Err(Error::invalid("lambda", "must be positive"));
        }
        if self.eps0 < 0.0 {
            return Err(Error::invalid("eps0", "must be non-negative"));
        }
        Ok(())
    }

    /// Noise-free regression function.
    pub fn mean(&self, x: f64) -> f64 {
        self.f0 + x * x * (self.k_f * x + self.phi_f).sin()
    }

    pub fn nu(&self, x: f64) -> f64 {
        self.eps0 + (self.k_eps * x + self.phi_eps).sin().abs()
    }

    /// Standard deviation of the label noise at `x`.
    pub fn noise_std(&self, x: f64) -> f64 {
        let s = self.lambda * self.nu(x);
        match self.noise_scale {
            NoiseScale::Std => s,
            NoiseScale::Variance => s.sqrt(),
        }
    }
}

/// Draws `n` points; the same `(params, seed)` always yields the same data.
pub fn generate_1d(n: usize, params: &Synth1DParams, seed: u64) -> Result<Dataset> {
    params.validate()?;
    if n == 0 {
        return Err(Error::invalid("n", "must be at least 1"));
    }
    let mut rng = Stream::new(seed, SYNTH_STREAM);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.uniform();
        let y = params.mean(x) + params.noise_std(x) * rng.normal();
        xs.push(x);
        ys.push(y);
    }
    Dataset::new(Matrix::column(xs), ys, None)
}

/// Base model specification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BaseRegressor {
    Knn { k: usize },
    BinnedMean { n_bins: usize },
}

impl Default for BaseRegressor {
    fn default() -> Self {
        BaseRegressor::Knn { k: 25 }
    }
}

impl BaseRegressor {
    pub fn fit(&self, train: &Dataset) -> Result<FittedRegressor> {
        if train.is_empty() {
            return Err(Error::Empty("training set"));
        }
        match *self {
            BaseRegressor::Knn { k } => {
                if k == 0 {
                    return Err(Error::invalid("k", "KNN regressor needs k >= 1"));
                }
                Ok(FittedRegressor::Knn {
                    k,
                    index: NeighborIndex::build(train.features()),
                    labels: train.labels().to_vec(),
                    dim: train.dim(),
                })
            }
            BaseRegressor::BinnedMean { n_bins } => {
                if n_bins == 0 {
                    return Err(Error::invalid("n_bins", "must be at least 1"));
                }
                if train.dim() != 1 {
                    return Err(Error::invalid("base", "binned mean regressor is 1-D only"));
                }
                let xs = train.features().col_values(0);
                let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sums = vec![(0.0, 0usize); n_bins];
                for (x, y) in xs.iter().zip(train.labels()) {
                    let b = bin_of(*x, lo, hi, n_bins);
                    sums[b].0 += y;
                    sums[b].1 += 1;
                }
                let mut means: Vec<Option<f64>> = sums
                    .iter()
                    .map(|&(s, c)| (c > 0).then(|| s / c as f64))
                    .collect();
                // Empty bins borrow the nearest non-empty bin, left first.
                let filled: Vec<(usize, f64)> = means
                    .iter()
                    .enumerate()
                    .filter_map(|(i, m)| m.map(|m| (i, m)))
                    .collect();
                for (i, m) in means.iter_mut().enumerate() {
                    if m.is_none() {
                        let nearest = filled
                            .iter()
                            .min_by_key(|(j, _)| (i.abs_diff(*j), *j))
                            .expect("at least one bin is filled");
                        *m = Some(nearest.1);
                    }
                }
                Ok(FittedRegressor::Binned {
                    lo,
                    hi,
                    means: means.into_iter().map(|m| m.unwrap()).collect(),
                })
            }
        }
    }
}

fn bin_of(x: f64, lo: f64, hi: f64, n_bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let t = ((x - lo) / (hi - lo) * n_bins as f64).floor();
    (t.max(0.0) as usize).min(n_bins - 1)
}

/// A base regressor after fitting.
#[derive(Debug, Clone)]
pub enum FittedRegressor {
    Knn {
        k: usize,
        index: NeighborIndex,
        labels: Vec<f64>,
        dim: usize,
    },
    Binned {
        lo: f64,
        hi: f64,
        means: Vec<f64>,
    },
}

impl FittedRegressor {
    pub fn predict_one(&self, x: &[f64]) -> Result<f64> {
        match self {
            FittedRegressor::Knn { k, index, labels, dim } => {
                if x.len() != *dim {
                    return Err(Error::DimensionMismatch {
                        expected: *dim,
                        got: x.len(),
                    });
                }
                let nb = index.knn(x, *k, |_| false);
                Ok(nb.iter().map(|n| labels[n.1]).sum::<f64>() / nb.len() as f64)
            }
            FittedRegressor::Binned { lo, hi, means } => {
                if x.len() != 1 {
                    return Err(Error::DimensionMismatch { expected: 1, got: x.len() });
                }
                Ok(means[bin_of(x[0], *lo, *hi, means.len())])
            }
        }
    }

    pub fn predict(&self, features: &Matrix) -> Result<Vec<f64>> {
        features.iter_rows().map(|r| self.predict_one(r)).collect()
    }
}
