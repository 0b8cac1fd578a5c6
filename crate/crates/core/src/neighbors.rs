//! Exact nearest-neighbor search.
//!
//! [`KdTree`] handles squared-Euclidean and Chebyshev metrics; [`NeighborIndex`]
//! picks the tree for embeddings of dimension ≤ 3 and falls back to brute
//! force above that. Results are always ordered by `(distance, index)` so
//! neighbor lists are identical whichever backend produced them.

use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Squared Euclidean distance (monotone in the Euclidean norm).
    SqEuclidean,
    /// Max-norm distance.
    Chebyshev,
}

impl Metric {
    #[inline]
    pub fn dist(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::SqEuclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
            Metric::Chebyshev => a
                .iter()
                .zip(b)
                .fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs())),
        }
    }

    /// Lower bound on the distance to any point beyond a splitting plane at
    /// coordinate offset `gap ≥ 0`.
    #[inline]
    fn plane_bound(self, gap: f64) -> f64 {
        match self {
            Metric::SqEuclidean => gap * gap,
            Metric::Chebyshev => gap,
        }
    }
}

/// `(distance, index)` pair; ordering is lexicographic.
pub type Neighbor = (f64, usize);

#[inline]
fn less(a: Neighbor, b: Neighbor) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Bounded, sorted candidate list.
struct Candidates {
    k: usize,
    items: Vec<Neighbor>,
}

impl Candidates {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn full(&self) -> bool {
        self.items.len() == self.k
    }

    #[inline]
    fn worst(&self) -> f64 {
        self.items.last().map_or(f64::INFINITY, |n| n.0)
    }

    #[inline]
    fn offer(&mut self, cand: Neighbor) {
        if self.full() && !less(cand, *self.items.last().unwrap()) {
            return;
        }
        let pos = self.items.partition_point(|&n| less(n, cand));
        self.items.insert(pos, cand);
        if self.items.len() > self.k {
            self.items.pop();
        }
    }
}

const LEAF_SIZE: usize = 12;
const NO_CHILD: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct Node {
    lo: u32,
    hi: u32,
    axis: u32,
    split: f64,
    left: u32,
    right: u32,
}

#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    metric: Metric,
    /// Points copied in tree order.
    coords: Vec<f64>,
    /// Original index of each tree-ordered point.
    ids: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &Matrix, metric: Metric) -> Self {
        let dim = points.cols();
        let mut ids: Vec<usize> = (0..points.rows()).collect();
        let mut nodes = Vec::new();
        if !ids.is_empty() {
            build(points, &mut ids, 0, &mut nodes);
        }
        let mut coords = Vec::with_capacity(points.rows() * dim);
        for &i in &ids {
            coords.extend_from_slice(points.row(i));
        }
        Self {
            dim,
            metric,
            coords,
            ids,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    #[inline]
    fn point(&self, slot: usize) -> &[f64] {
        &self.coords[slot * self.dim..(slot + 1) * self.dim]
    }

    /// The `k` nearest admissible points, sorted by `(distance, index)`.
    pub fn knn<F: Fn(usize) -> bool>(&self, q: &[f64], k: usize, skip: F) -> Vec<Neighbor> {
        let mut cands = Candidates::new(k);
        if k > 0 && !self.nodes.is_empty() {
            self.knn_rec(0, q, &mut cands, &skip);
        }
        cands.items
    }

    fn knn_rec<F: Fn(usize) -> bool>(&self, node: usize, q: &[f64], c: &mut Candidates, skip: &F) {
        let n = &self.nodes[node];
        if n.left == NO_CHILD {
            for slot in n.lo as usize..n.hi as usize {
                let id = self.ids[slot];
                if skip(id) {
                    continue;
                }
                c.offer((self.metric.dist(q, self.point(slot)), id));
            }
            return;
        }
        let diff = q[n.axis as usize] - n.split;
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.knn_rec(near as usize, q, c, skip);
        if !c.full() || self.metric.plane_bound(diff.abs()) <= c.worst() {
            self.knn_rec(far as usize, q, c, skip);
        }
    }

    /// All admissible points within `radius` (inclusive when `inclusive`),
    /// sorted by `(distance, index)`.
    pub fn within<F: Fn(usize) -> bool>(
        &self,
        q: &[f64],
        radius: f64,
        inclusive: bool,
        skip: F,
    ) -> Vec<Neighbor> {
        let mut out = Vec::new();
        if !self.nodes.is_empty() {
            self.within_rec(0, q, radius, inclusive, &skip, &mut out);
        }
        out.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out
    }

    fn within_rec<F: Fn(usize) -> bool>(
        &self,
        node: usize,
        q: &[f64],
        r: f64,
        inclusive: bool,
        skip: &F,
        out: &mut Vec<Neighbor>,
    ) {
        let n = &self.nodes[node];
        if n.left == NO_CHILD {
            for slot in n.lo as usize..n.hi as usize {
                let id = self.ids[slot];
                if skip(id) {
                    continue;
                }
                let d = self.metric.dist(q, self.point(slot));
                if d < r || (inclusive && d == r) {
                    out.push((d, id));
                }
            }
            return;
        }
        let diff = q[n.axis as usize] - n.split;
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.within_rec(near as usize, q, r, inclusive, skip, out);
        let b = self.metric.plane_bound(diff.abs());
        if b < r || (inclusive && b == r) {
            self.within_rec(far as usize, q, r, inclusive, skip, out);
        }
    }

    /// Number of points at distance strictly below `radius`.
    pub fn count_within(&self, q: &[f64], radius: f64) -> usize {
        if self.nodes.is_empty() {
            return 0;
        }
        self.count_rec(0, q, radius)
    }

    fn count_rec(&self, node: usize, q: &[f64], r: f64) -> usize {
        let n = &self.nodes[node];
        if n.left == NO_CHILD {
            return (n.lo as usize..n.hi as usize)
                .filter(|&slot| self.metric.dist(q, self.point(slot)) < r)
                .count();
        }
        let diff = q[n.axis as usize] - n.split;
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        let mut c = self.count_rec(near as usize, q, r);
        if self.metric.plane_bound(diff.abs()) < r {
            c += self.count_rec(far as usize, q, r);
        }
        c
    }
}

fn build(points: &Matrix, ids: &mut [usize], offset: usize, nodes: &mut Vec<Node>) -> u32 {
    let me = nodes.len();
    nodes.push(Node {
        lo: offset as u32,
        hi: (offset + ids.len()) as u32,
        axis: 0,
        split: 0.0,
        left: NO_CHILD,
        right: NO_CHILD,
    });
    if ids.len() <= LEAF_SIZE {
        return me as u32;
    }
    let dim = points.cols();
    let mut axis = 0;
    let mut best = -1.0;
    for a in 0..dim {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &i in ids.iter() {
            let v = points.get(i, a);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi - lo > best {
            best = hi - lo;
            axis = a;
        }
    }
    if best <= 0.0 {
        // All points coincide: keep as a leaf.
        return me as u32;
    }
    let mid = ids.len() / 2;
    ids.select_nth_unstable_by(mid, |&a, &b| {
        points.get(a, axis).total_cmp(&points.get(b, axis))
    });
    let split = points.get(ids[mid], axis);
    let (l, r) = ids.split_at_mut(mid);
    let left = build(points, l, offset, nodes);
    let right = build(points, r, offset + mid, nodes);
    let node = &mut nodes[me];
    node.axis = axis as u32;
    node.split = split;
    node.left = left;
    node.right = right;
    me as u32
}

/// Acceleration structure over a fixed point set (Euclidean metric).
#[derive(Debug, Clone)]
pub enum NeighborIndex {
    Tree(KdTree),
    Brute(Matrix),
}

/// Largest embedding dimension served by the kd-tree.
pub const TREE_MAX_DIM: usize = 3;

impl NeighborIndex {
    pub fn build(points: &Matrix) -> Self {
        if points.cols() <= TREE_MAX_DIM {
            NeighborIndex::Tree(KdTree::new(points, Metric::SqEuclidean))
        } else {
            NeighborIndex::Brute(points.clone())
        }
    }

    pub fn len(&self) -> usize {
        match self {
            NeighborIndex::Tree(t) => t.len(),
            NeighborIndex::Brute(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `k` nearest admissible points by squared Euclidean distance.
    pub fn knn<F: Fn(usize) -> bool>(&self, q: &[f64], k: usize, skip: F) -> Vec<Neighbor> {
        match self {
            NeighborIndex::Tree(t) => t.knn(q, k, skip),
            NeighborIndex::Brute(m) => {
                let mut c = Candidates::new(k);
                if k > 0 {
                    for (i, row) in m.iter_rows().enumerate() {
                        if !skip(i) {
                            c.offer((Metric::SqEuclidean.dist(q, row), i));
                        }
                    }
                }
                c.items
            }
        }
    }

    /// The `k` nearest admissible points plus every point tied with the
    /// `k`-th distance.
    pub fn knn_with_ties<F: Fn(usize) -> bool>(&self, q: &[f64], k: usize, skip: F) -> Vec<Neighbor> {
        let base = self.knn(q, k, &skip);
        if base.len() < k || k == 0 {
            return base;
        }
        let dk = base[k - 1].0;
        match self {
            NeighborIndex::Tree(t) => t.within(q, dk, true, skip),
            NeighborIndex::Brute(m) => {
                let mut out: Vec<Neighbor> = m
                    .iter_rows()
                    .enumerate()
                    .filter(|(i, _)| !skip(*i))
                    .map(|(i, row)| (Metric::SqEuclidean.dist(q, row), i))
                    .filter(|n| n.0 <= dk)
                    .collect();
                out.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use proptest::prelude::*;

    fn brute(points: &Matrix, q: &[f64], k: usize, metric: Metric, skip: usize) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = points
            .iter_rows()
            .enumerate()
            .filter(|(i, _)| *i != skip)
            .map(|(i, r)| (metric.dist(q, r), i))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.truncate(k);
        all
    }

    fn random_points(n: usize, d: usize, seed: u64, grid: bool) -> Matrix {
        let mut s = Stream::new(seed, 0);
        let data = (0..n * d)
            .map(|_| {
                let u = s.uniform();
                if grid {
                    (u * 4.0).floor()
                } else {
                    u
                }
            })
            .collect();
        Matrix::new(n, d, data).unwrap()
    }

    proptest! {
        #[test]
        fn tree_matches_brute(n in 1usize..120, d in 1usize..4, k in 1usize..8, seed: u64, grid: bool, cheb: bool) {
            let pts = random_points(n, d, seed, grid);
            let metric = if cheb { Metric::Chebyshev } else { Metric::SqEuclidean };
            let tree = KdTree::new(&pts, metric);
            for i in 0..n.min(10) {
                let q = pts.row(i);
                prop_assert_eq!(tree.knn(q, k, |j| j == i), brute(&pts, q, k, metric, i));
                let r = 0.3;
                let expect = pts.iter_rows().filter(|row| metric.dist(q, row) < r).count();
                prop_assert_eq!(tree.count_within(q, r), expect);
            }
        }

        #[test]
        fn backends_agree_with_ties(n in 1usize..80, d in 1usize..4, k in 1usize..6, seed: u64) {
            let pts = random_points(n, d, seed, true);
            let tree = NeighborIndex::Tree(KdTree::new(&pts, Metric::SqEuclidean));
            let flat = NeighborIndex::Brute(pts.clone());
            for i in 0..n.min(8) {
                let q = pts.row(i);
                let a = tree.knn_with_ties(q, k, |j| j == i);
                let b = flat.knn_with_ties(q, k, |j| j == i);
                prop_assert_eq!(&a, &b);
                if a.len() >= k {
                    let dk = a[k - 1].0;
                    prop_assert!(a.iter().all(|n| n.0 <= dk));
                }
            }
        }
    }

    #[test]
    fn duplicate_points_do_not_split_forever() {
        let pts = Matrix::new(100, 1, vec![0.5; 100]).unwrap();
        let tree = KdTree::new(&pts, Metric::SqEuclidean);
        let nn = tree.knn(&[0.5], 3, |_| false);
        assert_eq!(nn, vec![(0.0, 0), (0.0, 1), (0.0, 2)]);
    }
}
