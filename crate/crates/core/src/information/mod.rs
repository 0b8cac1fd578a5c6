//! Mutual information, PCA, coverage bounds and MI-driven kernel tuning.

mod bounds;
mod ksg;
mod pca;
mod tuning;

pub use bounds::{
    cantelli_threshold, finite_sample_alpha, local_coverage_bound, markov_coverage, CoverageBound,
};
pub use ksg::{ksg_mutual_information, ksg_with, MIEstimate, Preprocess};
pub use pca::{fit_pca, PCAProjection};
pub use tuning::{fixed_kernel_objective, tune_kernel, TuningParams, TuningResult};

use crate::error::Result;
use crate::matrix::Matrix;

/// Sum of one-dimensional MI estimates between `scores` and each input
/// direction: the raw columns when there are at most `n_pca` of them,
/// otherwise the top `n_pca` principal components.
pub fn mi_objective(embeddings: &Matrix, scores: &[f64], n_pca: usize, k: usize) -> Result<f64> {
    if embeddings.cols() <= n_pca {
        ksg::marginal_sum(embeddings, scores, k)
    } else {
        let pca = fit_pca(embeddings, n_pca.min(embeddings.rows()))?;
        ksg::marginal_sum(&pca.project(embeddings)?, scores, k)
    }
}
