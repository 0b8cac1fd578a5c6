use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Principal directions of a data matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PCAProjection {
    pub means: Vec<f64>,
    /// One orthonormal direction per row.
    pub components: Matrix,
    /// Variance along each component, non-increasing.
    pub explained_variance: Vec<f64>,
}

/// Top `n_components` directions of the sample covariance.
pub fn fit_pca(data: &Matrix, n_components: usize) -> Result<PCAProjection> {
    let (n, d) = (data.rows(), data.cols());
    if n < 2 {
        return Err(Error::Degenerate(format!("PCA needs at least 2 rows, got {n}")));
    }
    if n_components == 0 || n_components > n.min(d) {
        return Err(Error::invalid(
            "n_components",
            format!("{n_components} is not in 1..={}", n.min(d)),
        ));
    }
    let means: Vec<f64> = (0..d)
        .map(|c| data.iter_rows().map(|r| r[c]).sum::<f64>() / n as f64)
        .collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in data.iter_rows() {
        for a in 0..d {
            let da = r[a] - means[a];
            for b in a..d {
                cov[(a, b)] += da * (r[b] - means[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / (n - 1) as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut comps = Vec::with_capacity(n_components * d);
    let mut variance = Vec::with_capacity(n_components);
    for &j in order.iter().take(n_components) {
        let v = eig.eigenvectors.column(j);
        // Sign convention: the largest-magnitude entry is positive.
        let pivot = (0..d)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        comps.extend(v.iter().map(|x| sign * x));
        variance.push(eig.eigenvalues[j].max(0.0));
    }
    Ok(PCAProjection {
        means,
        components: Matrix::new(n_components, d, comps)?,
        explained_variance: variance,
    })
}

impl PCAProjection {
    pub fn n_components(&self) -> usize {
        self.components.rows()
    }

    /// Coordinates of each row of `data` along the components.
    pub fn project(&self, data: &Matrix) -> Result<Matrix> {
        if data.cols() != self.means.len() {
            return Err(Error::DimensionMismatch {
                expected: self.means.len(),
                got: data.cols(),
            });
        }
        let k = self.n_components();
        let mut out = Vec::with_capacity(data.rows() * k);
        for r in data.iter_rows() {
            for c in self.components.iter_rows() {
                out.push(r.iter().zip(&self.means).zip(c).map(|((x, m), w)| (x - m) * w).sum());
            }
        }
        Matrix::new(data.rows(), k, out)
    }

    /// Maps projected coordinates back to the input space.
    pub fn reconstruct(&self, projected: &Matrix) -> Result<Matrix> {
        if projected.cols() != self.n_components() {
            return Err(Error::DimensionMismatch {
                expected: self.n_components(),
                got: projected.cols(),
            });
        }
        let d = self.means.len();
        let mut out = Vec::with_capacity(projected.rows() * d);
        for z in projected.iter_rows() {
            for j in 0..d {
                out.push(self.means[j] + z.iter().enumerate().map(|(c, zc)| zc * self.components.get(c, j)).sum::<f64>());
            }
        }
        Matrix::new(projected.rows(), d, out)
    }
}
