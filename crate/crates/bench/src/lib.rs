//! Shared fixtures for the criterion benchmarks.

use conformal_core::synthetic::{generate_1d, BaseRegressor, Synth1DParams};
use conformal_core::{Dataset, Matrix};

/// A calibration or test block: inputs, base-model predictions and labels.
pub struct Block {
    pub emb: Matrix,
    pub preds: Vec<f64>,
    pub labels: Vec<f64>,
}

fn block(data: &Dataset, preds: Vec<f64>) -> Block {
    Block {
        emb: data.features().clone(),
        preds,
        labels: data.labels().to_vec(),
    }
}

/// 1D synthetic calibration and test blocks with a KNN(25) base model fitted
/// on 1000 training points.
pub fn synthetic_blocks(n_cal: usize, n_test: usize, seed: u64) -> (Block, Block) {
    let params = Synth1DParams::default();
    let train = generate_1d(1000, &params, seed).expect("generator");
    let cal = generate_1d(n_cal, &params, seed + 1).expect("generator");
    let test = generate_1d(n_test, &params, seed + 2).expect("generator");
    let model = BaseRegressor::default().fit(&train).expect("fit");
    let cal_preds = model.predict(cal.features()).expect("predict");
    let test_preds = model.predict(test.features()).expect("predict");
    (block(&cal, cal_preds), block(&test, test_preds))
}

/// Standard bivariate Gaussian pair with correlation `rho`.
pub fn gaussian_pair(n: usize, rho: f64, seed: u64) -> (Matrix, Vec<f64>) {
    let mut rng = conformal_core::rng::Stream::new(seed, 1);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let a = rng.normal();
        let b = rng.normal();
        xs.push(a);
        ys.push(rho * a + (1.0 - rho * rho).sqrt() * b);
    }
    (Matrix::column(xs), ys)
}
