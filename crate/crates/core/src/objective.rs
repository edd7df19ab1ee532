//! Contrastive neighbor-embedding loss with negative sampling: attraction
//! over kNN edges, repulsion over uniformly sampled non-neighbor pairs, and
//! the analytic gradients of both with respect to embedding coordinates.
//!
//! The raw loss is singular where the kernel hits 0 or 1, so both log
//! arguments are clamped at [`LOG_EPS`]; the clamp lives here, the kernel
//! itself stays exact.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{cauchy_kernel, Dataset, KnnGraph};
use crate::matrix::{sq_dist, Matrix};
use crate::nn::{backward, forward, Gradients, Mlp};

/// Lower clamp for the arguments of `log(phi)` and `log(1 - phi)`.
pub const LOG_EPS: f64 = 1e-4;

/// A batch of sampled kNN edges plus per-edge negative samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeBatch {
    pub anchors: Vec<u32>,
    pub positives: Vec<u32>,
    /// Row-major `[len x negatives_per_edge]`.
    pub negatives: Vec<u32>,
    pub negatives_per_edge: usize,
}

impl EdgeBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// The three loss terms of a local step. `total` is always their exact sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub attraction: f64,
    pub repulsion: f64,
    pub surrogate: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(attraction: f64, repulsion: f64, surrogate: f64) -> Self {
        LossBreakdown {
            attraction,
            repulsion,
            surrogate,
            total: attraction + repulsion + surrogate,
        }
    }

    pub fn zero() -> Self {
        LossBreakdown::new(0.0, 0.0, 0.0)
    }
}

/// Draws `batch_size` directed kNN edges uniformly with replacement, plus
/// `b` negatives per edge sampled uniformly over all points except the
/// anchor (neighbors are *not* excluded).
pub fn sample_edge_batch<R: Rng>(
    graph: &KnnGraph,
    batch_size: usize,
    b: usize,
    rng: &mut R,
) -> Result<EdgeBatch> {
    let n = graph.num_points();
    if n < 2 || graph.k == 0 {
        return Err(Error::TooFewPoints(
            "sample_edge_batch: graph needs >= 2 points with k >= 1".into(),
        ));
    }
    if batch_size == 0 {
        return Err(Error::config("sample_edge_batch: batch_size must be >= 1"));
    }
    let num_edges = graph.num_edges();
    let mut anchors = Vec::with_capacity(batch_size);
    let mut positives = Vec::with_capacity(batch_size);
    let mut negatives = Vec::with_capacity(batch_size * b);
    for _ in 0..batch_size {
        let e = rng.random_range(0..num_edges);
        let a = e / graph.k;
        let j = graph.neighbors[a][e % graph.k];
        anchors.push(a as u32);
        positives.push(j);
        for _ in 0..b {
            // Uniform over [0, n) \ {a}.
            let mut r = rng.random_range(0..n - 1);
            if r >= a {
                r += 1;
            }
            negatives.push(r as u32);
        }
    }
    Ok(EdgeBatch {
        anchors,
        positives,
        negatives,
        negatives_per_edge: b,
    })
}

/// Attraction between an embedded kNN pair: `-log(phi)` = `log(1 + d²)`,
/// capped at `-log(eps)`. Returns (loss, grad wrt anchor, grad wrt positive).
pub fn attraction_loss(z_anchor: &[f64; 2], z_pos: &[f64; 2]) -> (f64, [f64; 2], [f64; 2]) {
    attraction_loss_eps(z_anchor, z_pos, LOG_EPS)
}

pub fn attraction_loss_eps(
    z_anchor: &[f64; 2],
    z_pos: &[f64; 2],
    eps: f64,
) -> (f64, [f64; 2], [f64; 2]) {
    let d2 = sq_dist(z_anchor, z_pos);
    let phi = 1.0 / (1.0 + d2);
    if phi < eps {
        // Clamped region: constant loss, zero gradient.
        return (-eps.ln(), [0.0; 2], [0.0; 2]);
    }
    let loss = (1.0 + d2).ln();
    let c = 2.0 / (1.0 + d2);
    let ga = [c * (z_anchor[0] - z_pos[0]), c * (z_anchor[1] - z_pos[1])];
    (loss, ga, [-ga[0], -ga[1]])
}

/// Repulsion between an embedded non-neighbor pair: `-log(1 - phi)` with
/// `phi` clamped to at most `1 - eps`. Returns (loss, grad anchor, grad neg).
pub fn repulsion_loss(z_anchor: &[f64; 2], z_neg: &[f64; 2]) -> (f64, [f64; 2], [f64; 2]) {
    repulsion_loss_eps(z_anchor, z_neg, LOG_EPS)
}

pub fn repulsion_loss_eps(
    z_anchor: &[f64; 2],
    z_neg: &[f64; 2],
    eps: f64,
) -> (f64, [f64; 2], [f64; 2]) {
    let d2 = sq_dist(z_anchor, z_neg);
    let phi = 1.0 / (1.0 + d2);
    if phi > 1.0 - eps {
        return (-eps.ln(), [0.0; 2], [0.0; 2]);
    }
    let loss = -(1.0 - phi).ln();
    // d/dza of -log(1 - phi) = -2 (za - zn) / (d² (1 + d²)).
    let c = -2.0 / (d2 * (1.0 + d2));
    let ga = [c * (z_anchor[0] - z_neg[0]), c * (z_anchor[1] - z_neg[1])];
    (loss, ga, [-ga[0], -ga[1]])
}

/// Scalar repulsion value only (the clamped `-log(1 - phi)`); used when
/// building surrogate training targets.
pub fn repulsion_value(a: &[f64], b: &[f64]) -> f64 {
    let phi = cauchy_kernel(a, b).min(1.0 - LOG_EPS);
    -(1.0 - phi).ln()
}

/// Stacks the batch's points into one input matrix:
/// rows `[0, E)` anchors, `[E, 2E)` positives, `[2E, 2E + E*b)` negatives.
pub fn assemble_edge_inputs(data: &Dataset, batch: &EdgeBatch) -> Result<Matrix> {
    let e = batch.len();
    let b = batch.negatives_per_edge;
    let d = data.dim();
    let mut x = Matrix::zeros(e * (2 + b), d);
    let n = data.len() as u32;
    let fetch = |idx: u32| -> Result<&[f64]> {
        if idx >= n {
            return Err(Error::config(format!(
                "edge batch index {idx} out of range for {n} points"
            )));
        }
        Ok(data.points.row(idx as usize))
    };
    for (r, &a) in batch.anchors.iter().enumerate() {
        x.row_mut(r).copy_from_slice(fetch(a)?);
    }
    for (r, &p) in batch.positives.iter().enumerate() {
        x.row_mut(e + r).copy_from_slice(fetch(p)?);
    }
    for (r, &g) in batch.negatives.iter().enumerate() {
        x.row_mut(2 * e + r).copy_from_slice(fetch(g)?);
    }
    Ok(x)
}

/// Attraction/repulsion terms and their gradients with respect to the
/// embedded rows of [`assemble_edge_inputs`]' layout. Attraction is the mean
/// over edges; repulsion is `repulsion_weight` times the mean over
/// (edge, negative) pairs.
pub fn ne_embedding_grads(
    z: &Matrix,
    num_edges: usize,
    b: usize,
    repulsion_weight: f64,
) -> Result<(f64, f64, Matrix)> {
    if z.cols() != 2 || z.rows() != num_edges * (2 + b) {
        return Err(Error::dim(format!(
            "ne_embedding_grads: z is {}x{}, expected {}x2",
            z.rows(),
            z.cols(),
            num_edges * (2 + b)
        )));
    }
    let e = num_edges;
    let mut dz = Matrix::zeros(z.rows(), 2);
    let inv_e = 1.0 / e as f64;
    let rep_coeff = repulsion_weight / (e * b) as f64;
    let mut attraction = 0.0;
    let mut repulsion_mean = 0.0;
    for i in 0..e {
        let za = [z.get(i, 0), z.get(i, 1)];
        let zp = [z.get(e + i, 0), z.get(e + i, 1)];
        let (l, ga, gp) = attraction_loss(&za, &zp);
        attraction += l * inv_e;
        {
            let row = dz.row_mut(i);
            row[0] += ga[0] * inv_e;
            row[1] += ga[1] * inv_e;
        }
        {
            let row = dz.row_mut(e + i);
            row[0] += gp[0] * inv_e;
            row[1] += gp[1] * inv_e;
        }
        for j in 0..b {
            let nr = 2 * e + i * b + j;
            let zn = [z.get(nr, 0), z.get(nr, 1)];
            let (l, ga, gn) = repulsion_loss(&za, &zn);
            repulsion_mean += l / (e * b) as f64;
            {
                let row = dz.row_mut(i);
                row[0] += ga[0] * rep_coeff;
                row[1] += ga[1] * rep_coeff;
            }
            {
                let row = dz.row_mut(nr);
                row[0] += gn[0] * rep_coeff;
                row[1] += gn[1] * rep_coeff;
            }
        }
    }
    Ok((attraction, repulsion_weight * repulsion_mean, dz))
}

/// Full local NE loss on one edge batch: forward, embedding-space gradients,
/// backward. The surrogate field of the breakdown is zero here.
pub fn local_ne_loss(
    model: &Mlp,
    data: &Dataset,
    batch: &EdgeBatch,
    repulsion_weight: f64,
) -> Result<(LossBreakdown, Gradients)> {
    let x = assemble_edge_inputs(data, batch)?;
    let z = forward(model, &x)?;
    let (attraction, repulsion, dz) =
        ne_embedding_grads(&z, batch.len(), batch.negatives_per_edge, repulsion_weight)?;
    let (grads, _) = backward(model, &x, &dz)?;
    Ok((LossBreakdown::new(attraction, repulsion, 0.0), grads))
}
