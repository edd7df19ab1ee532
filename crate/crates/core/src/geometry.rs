//! Datasets, squared Euclidean distances, the Cauchy similarity kernel, and
//! exact kNN-graph construction.
//!
//! kNN is exact brute force. At desk scale that is affordable and removes a
//! stochastic confound when comparing federated methods against baselines.
//! Distance ties break by ascending point index.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{sq_dist, Matrix};

/// High-dimensional points with integer labels and stable ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Matrix,
    pub labels: Vec<i32>,
    pub ids: Vec<u64>,
}

impl Dataset {
    pub fn new(points: Matrix, labels: Vec<i32>, ids: Vec<u64>) -> Result<Self> {
        let n = points.rows();
        if n == 0 || points.cols() == 0 {
            return Err(Error::TooFewPoints("dataset must be non-empty".into()));
        }
        if labels.len() != n || ids.len() != n {
            return Err(Error::dim(format!(
                "{} points, {} labels, {} ids",
                n,
                labels.len(),
                ids.len()
            )));
        }
        if !points.all_finite() {
            return Err(Error::config("dataset contains non-finite coordinates"));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != n {
            return Err(Error::config("dataset ids are not unique"));
        }
        Ok(Dataset { points, labels, ids })
    }

    /// Canonical ids 0..N.
    pub fn from_points(points: Matrix, labels: Vec<i32>) -> Result<Self> {
        let n = points.rows();
        let ids = (0..n as u64).collect();
        Dataset::new(points, labels, ids)
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Number of distinct label values.
    pub fn num_classes(&self) -> usize {
        let mut ls = self.labels.clone();
        ls.sort_unstable();
        ls.dedup();
        ls.len()
    }

    /// Row subset in the given index order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut points = Matrix::zeros(indices.len(), self.dim());
        let mut labels = Vec::with_capacity(indices.len());
        let mut ids = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::config(format!("subset index {i} out of range")));
            }
            points.row_mut(r).copy_from_slice(self.points.row(i));
            labels.push(self.labels[i]);
            ids.push(self.ids[i]);
        }
        Dataset::new(points, labels, ids)
    }
}

/// Per-point neighbor lists, nearest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    pub k: usize,
    pub neighbors: Vec<Vec<u32>>,
}

impl KnnGraph {
    pub fn num_points(&self) -> usize {
        self.neighbors.len()
    }

    /// Total number of directed kNN edges.
    pub fn num_edges(&self) -> usize {
        self.neighbors.len() * self.k
    }
}

/// Cauchy similarity: `1 / (1 + ||a - b||^2)`, in (0, 1].
#[inline]
pub fn cauchy_kernel(a: &[f64], b: &[f64]) -> f64 {
    1.0 / (1.0 + sq_dist(a, b))
}

/// Exact Euclidean kNN with ties broken by ascending point index.
pub fn build_knn(data: &Dataset, k: usize) -> Result<KnnGraph> {
    let n = data.len();
    if k == 0 {
        return Err(Error::config("build_knn: k must be >= 1"));
    }
    if n <= k {
        return Err(Error::TooFewPoints(format!(
            "build_knn: need N > k, got N={n}, k={k}"
        )));
    }
    let neighbors: Vec<Vec<u32>> = (0..n)
        .into_par_iter()
        .map(|i| knn_row(&data.points, i, k))
        .collect();
    Ok(KnnGraph { k, neighbors })
}

fn knn_row(points: &Matrix, i: usize, k: usize) -> Vec<u32> {
    let n = points.rows();
    let xi = points.row(i);
    // (distance², index) of the current k best, kept sorted ascending.
    let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
    for j in 0..n {
        if j == i {
            continue;
        }
        let d = sq_dist(xi, points.row(j));
        if best.len() == k && (d, j as u32) >= (best[k - 1].0, best[k - 1].1) {
            continue;
        }
        let pos = best.partition_point(|&(bd, bj)| (bd, bj) < (d, j as u32));
        best.insert(pos, (d, j as u32));
        if best.len() > k {
            best.pop();
        }
    }
    best.into_iter().map(|(_, j)| j).collect()
}

/// Entry (i, j) = squared distance between `a`'s row i and `b`'s row j.
pub fn pairwise_sq_dists(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::dim(format!(
            "pairwise_sq_dists: dims {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ra = a.row(i);
        let orow = out.row_mut(i);
        for j in 0..b.rows() {
            orow[j] = sq_dist(ra, b.row(j));
        }
    }
    Ok(out)
}
