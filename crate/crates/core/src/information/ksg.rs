use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::neighbors::{KdTree, Metric};
use crate::rng::mix64;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// A mutual-information estimate in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MIEstimate {
    pub value: f64,
    pub k_neighbors: usize,
    pub n_samples: usize,
}

/// Marginal transform applied before neighbor counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocess {
    /// Replace each column by its ranks; ties are ordered by a keyed hash of
    /// the row index.
    #[default]
    Rank,
    /// Center and scale to unit variance, then add a vanishing keyed jitter.
    Standardize,
}

/// `psi(1..=n)` by the recurrence `psi(m + 1) = psi(m) + 1/m`; index 0 is unused.
fn digamma_table(n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n + 1];
    if n >= 1 {
        t[1] = -EULER_GAMMA;
    }
    for m in 1..n {
        t[m + 1] = t[m] + 1.0 / m as f64;
    }
    t
}

fn keyed_unit(i: usize, salt: u64) -> f64 {
    (mix64(i as u64 ^ salt.wrapping_mul(0xA24B_AED4_963E_E407)) >> 11) as f64 / (1u64 << 53) as f64
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|x| *x == v[0])
}

fn transform(v: &[f64], how: Preprocess, salt: u64) -> Vec<f64> {
    match how {
        Preprocess::Rank => {
            let mut order: Vec<usize> = (0..v.len()).collect();
            order.sort_by(|&a, &b| {
                v[a].total_cmp(&v[b])
                    .then_with(|| keyed_unit(a, salt).total_cmp(&keyed_unit(b, salt)))
                    .then(a.cmp(&b))
            });
            // Distinct integer ranks put many pairs at exactly equal
            // marginal distances; a sub-unit keyed jitter splits those ties.
            let mut r = vec![0.0; v.len()];
            for (rank, &i) in order.iter().enumerate() {
                r[i] = rank as f64 + 1e-3 * (keyed_unit(i, salt ^ 0x5eed) - 0.5);
            }
            r
        }
        Preprocess::Standardize => {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
            v.iter()
                .enumerate()
                .map(|(i, x)| (x - mean) / sd + 1e-10 * (keyed_unit(i, salt) - 0.5))
                .collect()
        }
    }
}

/// Number of entries of `sorted` strictly closer than `eps` to `c`, where `c`
/// itself is one of the entries and is not counted.
fn count_strict_sorted(sorted: &[f64], c: f64, eps: f64) -> usize {
    let lo = sorted.partition_point(|&v| c - v >= eps);
    let hi = sorted.partition_point(|&v| v - c < eps);
    hi - lo - 1
}

/// KSG estimator (first algorithm) on already-transformed columns.
fn ksg_columns(xcols: &[Vec<f64>], s: &[f64], k: usize, psi: &[f64]) -> f64 {
    let n = s.len();
    let dx = xcols.len();
    let mut joint = Vec::with_capacity(n * (dx + 1));
    for i in 0..n {
        for c in xcols {
            joint.push(c[i]);
        }
        joint.push(s[i]);
    }
    let joint = Matrix::new(n, dx + 1, joint).expect("consistent shape");
    let tree = KdTree::new(&joint, Metric::Chebyshev);

    let mut s_sorted = s.to_vec();
    s_sorted.sort_by(f64::total_cmp);
    enum XCount {
        Sorted(Vec<f64>),
        Tree(KdTree),
    }
    let xc = if dx == 1 {
        let mut v = xcols[0].clone();
        v.sort_by(f64::total_cmp);
        XCount::Sorted(v)
    } else {
        let flat: Vec<f64> = (0..n).flat_map(|i| xcols.iter().map(move |c| c[i])).collect();
        XCount::Tree(KdTree::new(&Matrix::new(n, dx, flat).expect("shape"), Metric::Chebyshev))
    };

    let mut acc = 0.0;
    let mut xq = vec![0.0; dx];
    for i in 0..n {
        let q = joint.row(i);
        let eps = tree.knn(q, k, |j| j == i)[k - 1].0;
        let nx = match &xc {
            XCount::Sorted(v) => count_strict_sorted(v, xcols[0][i], eps),
            XCount::Tree(t) => {
                xq.copy_from_slice(&q[..dx]);
                t.count_within(&xq, eps) - 1
            }
        };
        let ns = count_strict_sorted(&s_sorted, s[i], eps);
        acc += psi[nx + 1] + psi[ns + 1];
    }
    psi[k] + psi[n] - acc / n as f64
}

fn validate(x: &Matrix, s: &[f64], k: usize) -> Result<()> {
    if x.rows() != s.len() {
        return Err(Error::LengthMismatch {
            what: "scores",
            expected: x.rows(),
            got: s.len(),
        });
    }
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    if s.len() <= k {
        return Err(Error::invalid(
            "k",
            format!("need more than k = {k} samples, got {}", s.len()),
        ));
    }
    if x.as_slice().iter().chain(s).any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite value in mutual information input".into()));
    }
    Ok(())
}

/// KSG estimate of `MI(x; s)` with max-norm neighborhoods and the default
/// rank preprocessing. Raw estimates below zero are clamped to zero.
pub fn ksg_mutual_information(x: &Matrix, s: &[f64], k: usize) -> Result<MIEstimate> {
    ksg_with(x, s, k, Preprocess::default())
}

pub fn ksg_with(x: &Matrix, s: &[f64], k: usize, how: Preprocess) -> Result<MIEstimate> {
    validate(x, s, k)?;
    let n = s.len();
    let est = |value| MIEstimate {
        value,
        k_neighbors: k,
        n_samples: n,
    };
    let xcols: Vec<Vec<f64>> = (0..x.cols()).map(|c| x.col_values(c)).collect();
    if xcols.iter().any(|c| is_constant(c)) || is_constant(s) {
        log::warn!("mutual information: constant column, returning 0");
        return Ok(est(0.0));
    }
    let xcols: Vec<Vec<f64>> = xcols
        .iter()
        .enumerate()
        .map(|(c, v)| transform(v, how, c as u64 + 1))
        .collect();
    let s = transform(s, how, 0);
    let psi = digamma_table(n + 1);
    Ok(est(ksg_columns(&xcols, &s, k, &psi).max(0.0)))
}

/// Sum over columns of the one-dimensional estimates `MI(x_c; s)`.
pub(crate) fn marginal_sum(x: &Matrix, s: &[f64], k: usize) -> Result<f64> {
    validate(x, s, k)?;
    let n = s.len();
    if is_constant(s) {
        log::warn!("mutual information: constant scores, returning 0");
        return Ok(0.0);
    }
    let st = transform(s, Preprocess::default(), 0);
    let psi = digamma_table(n + 1);
    let mut total = 0.0;
    for c in 0..x.cols() {
        let col = x.col_values(c);
        if is_constant(&col) {
            log::warn!("mutual information: constant column {c}, term is 0");
            continue;
        }
        let xt = transform(&col, Preprocess::default(), c as u64 + 1);
        total += ksg_columns(&[xt], &st, k, &psi).max(0.0);
    }
    Ok(total)
}
