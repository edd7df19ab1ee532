//! Per-client surrogate repulsion models.
//!
//! A surrogate is a one-hidden-layer MLP from a 2D embedding point to a
//! scalar estimate of the aggregate repulsive loss toward the owning
//! client's points. Clients build a training set by sampling a grid over
//! their current embedding bounding box, computing clamped repulsion targets
//! against `b` random local embeddings per query, and fitting by MSE. Shared
//! surrogates stand in for the inter-client repulsion other clients cannot
//! compute.
//!
//! Surrogates only ever see 2D inputs; no high-dimensional client data
//! crosses this interface.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write as IoWrite};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{
    adam_step, backward, forward, init_mlp, read_checkpoint, write_checkpoint, Activation,
    AdamState, Mlp,
};
use crate::objective::repulsion_value;

/// Scalar repulsion estimator owned by one client.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub net: Mlp,
    pub owner: usize,
    pub round_built: usize,
    /// Original (pre-augmentation) |D_m| of the owner; drives Eq.-style
    /// penalty weights on the receiving side.
    pub owner_size: usize,
}

impl SurrogateModel {
    pub fn fresh(hidden: usize, owner: usize, owner_size: usize, seed: u64) -> Result<Self> {
        if owner_size == 0 {
            return Err(Error::config("surrogate owner_size must be > 0"));
        }
        let net = init_mlp(&[2, hidden, 1], &[Activation::ReLU, Activation::Identity], seed)?;
        Ok(SurrogateModel {
            net,
            owner,
            round_built: 0,
            owner_size,
        })
    }

    pub fn predict(&self, points: &Matrix) -> Result<Vec<f64>> {
        let out = forward(&self.net, points)?;
        Ok((0..out.rows()).map(|r| out.get(r, 0)).collect())
    }
}

/// Query points and their precomputed repulsion targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateTrainSet {
    pub queries: Matrix,
    pub targets: Vec<f64>,
}

impl SurrogateTrainSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Lattice parameters for grid sampling over the embedding bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub step: f64,
    pub margin_fraction: f64,
    pub max_points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            step: 0.3,
            margin_fraction: 0.2,
            max_points: 40_000,
        }
    }
}

fn axis_count(lo: f64, hi: f64, step: f64) -> usize {
    ((hi - lo) / step + 1e-9).floor() as usize + 1
}

/// Regular lattice covering the bounding box of `client_embeddings`, each
/// side expanded by `margin_fraction` of its extent. If the lattice would
/// exceed `max_points`, the step is inflated uniformly until it fits.
pub fn sample_grid(client_embeddings: &Matrix, spec: &GridSpec) -> Result<Matrix> {
    if client_embeddings.rows() == 0 || client_embeddings.cols() != 2 {
        return Err(Error::dim(format!(
            "sample_grid: embeddings must be n x 2, got {}x{}",
            client_embeddings.rows(),
            client_embeddings.cols()
        )));
    }
    if !(spec.step > 0.0) {
        return Err(Error::config("grid step must be > 0"));
    }
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in 0..client_embeddings.rows() {
        let row = client_embeddings.row(r);
        xmin = xmin.min(row[0]);
        xmax = xmax.max(row[0]);
        ymin = ymin.min(row[1]);
        ymax = ymax.max(row[1]);
    }
    let mx = spec.margin_fraction * (xmax - xmin);
    let my = spec.margin_fraction * (ymax - ymin);
    xmin -= mx;
    xmax += mx;
    ymin -= my;
    ymax += my;

    let mut step = spec.step;
    let mut nx = axis_count(xmin, xmax, step);
    let mut ny = axis_count(ymin, ymax, step);
    while nx * ny > spec.max_points.max(1) {
        let inflate = ((nx * ny) as f64 / spec.max_points.max(1) as f64).sqrt();
        step *= inflate.max(1.02);
        nx = axis_count(xmin, xmax, step);
        ny = axis_count(ymin, ymax, step);
    }

    let mut grid = Matrix::zeros(nx * ny, 2);
    let mut r = 0;
    for iy in 0..ny {
        let y = ymin + iy as f64 * step;
        for ix in 0..nx {
            let row = grid.row_mut(r);
            row[0] = xmin + ix as f64 * step;
            row[1] = y;
            r += 1;
        }
    }
    Ok(grid)
}

/// For each query, draws `b` client embeddings with replacement and sums the
/// clamped repulsion values; the sum (not the mean) is the target.
pub fn build_targets<R: Rng>(
    queries: &Matrix,
    client_embeddings: &Matrix,
    b: usize,
    rng: &mut R,
) -> Result<SurrogateTrainSet> {
    if client_embeddings.rows() == 0 {
        return Err(Error::TooFewPoints("build_targets: no client embeddings".into()));
    }
    if b == 0 {
        return Err(Error::config("build_targets: b must be >= 1"));
    }
    if queries.cols() != 2 || client_embeddings.cols() != 2 {
        return Err(Error::dim("build_targets: points must be 2D"));
    }
    let n = client_embeddings.rows();
    let mut targets = Vec::with_capacity(queries.rows());
    for q in 0..queries.rows() {
        let zq = queries.row(q);
        let mut acc = 0.0;
        for _ in 0..b {
            let j = rng.random_range(0..n);
            acc += repulsion_value(zq, client_embeddings.row(j));
        }
        targets.push(acc);
    }
    Ok(SurrogateTrainSet {
        queries: queries.clone(),
        targets,
    })
}

/// MSE before/after a training call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateTrainStats {
    pub initial_mse: f64,
    pub final_mse: f64,
}

pub fn surrogate_mse(model: &SurrogateModel, set: &SurrogateTrainSet) -> Result<f64> {
    let preds = model.predict(&set.queries)?;
    let n = set.len().max(1) as f64;
    Ok(preds
        .iter()
        .zip(&set.targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Fine-tunes the surrogate on the train set with minibatch Adam on MSE.
/// Warm-starts from the passed model; zero epochs leave it untouched.
pub fn train_surrogate<R: Rng>(
    model: &mut SurrogateModel,
    set: &SurrogateTrainSet,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut R,
) -> Result<SurrogateTrainStats> {
    if set.is_empty() {
        return Err(Error::TooFewPoints("train_surrogate: empty train set".into()));
    }
    let initial_mse = surrogate_mse(model, set)?;
    if epochs == 0 {
        return Ok(SurrogateTrainStats {
            initial_mse,
            final_mse: initial_mse,
        });
    }
    let n = set.len();
    let bs = batch_size.clamp(1, n);
    let mut state = AdamState::new(model.net.param_count(), lr);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..epochs {
        // Late-phase decay settles the minibatch noise floor.
        state.lr = if epoch * 10 >= epochs * 7 { lr * 0.1 } else { lr };
        order.shuffle(rng);
        for chunk in order.chunks(bs) {
            let mut x = Matrix::zeros(chunk.len(), 2);
            for (r, &i) in chunk.iter().enumerate() {
                x.row_mut(r).copy_from_slice(set.queries.row(i));
            }
            let pred = forward(&model.net, &x)?;
            // d/dpred of mean squared error over the minibatch.
            let mut og = Matrix::zeros(chunk.len(), 1);
            for (r, &i) in chunk.iter().enumerate() {
                og.set(r, 0, 2.0 * (pred.get(r, 0) - set.targets[i]) / chunk.len() as f64);
            }
            let (grads, _) = backward(&model.net, &x, &og)?;
            adam_step(&mut model.net, &grads, &mut state)?;
        }
    }
    let final_mse = surrogate_mse(model, set)?;
    Ok(SurrogateTrainStats {
        initial_mse,
        final_mse,
    })
}

/// Weighted sum of the mean surrogate outputs over an embedded batch, plus
/// the gradient of that sum with respect to each embedded point.
pub fn surrogate_penalty(
    models: &[&SurrogateModel],
    weights: &[f64],
    embedded: &Matrix,
) -> Result<(f64, Matrix)> {
    if models.len() != weights.len() {
        return Err(Error::dim(format!(
            "surrogate_penalty: {} models, {} weights",
            models.len(),
            weights.len()
        )));
    }
    if embedded.cols() != 2 {
        return Err(Error::dim("surrogate_penalty: embedded batch must be n x 2"));
    }
    let n = embedded.rows();
    let mut grads = Matrix::zeros(n, 2);
    let mut penalty = 0.0;
    if n == 0 {
        return Ok((penalty, grads));
    }
    for (model, &w) in models.iter().zip(weights) {
        if w < 0.0 {
            return Err(Error::config("surrogate weights must be nonnegative"));
        }
        let out = forward(&model.net, embedded)?;
        let mean = (0..n).map(|r| out.get(r, 0)).sum::<f64>() / n as f64;
        penalty += w * mean;
        let mut og = Matrix::zeros(n, 1);
        let c = w / n as f64;
        for r in 0..n {
            og.set(r, 0, c);
        }
        let (_, xg) = backward(&model.net, embedded, &og)?;
        for r in 0..n {
            let g = xg.row(r);
            let acc = grads.row_mut(r);
            acc[0] += g[0];
            acc[1] += g[1];
        }
    }
    Ok((penalty, grads))
}

const SURROGATE_MAGIC: &[u8; 4] = b"FNES";

/// Surrogate checkpoint: magic "FNES", u32 owner, u32 round_built,
/// u64 owner_size, then an embedded "FNE1" parameter block.
pub fn write_surrogate<W: IoWrite>(model: &SurrogateModel, w: &mut W) -> Result<()> {
    w.write_all(SURROGATE_MAGIC)?;
    w.write_all(&(model.owner as u32).to_le_bytes())?;
    w.write_all(&(model.round_built as u32).to_le_bytes())?;
    w.write_all(&(model.owner_size as u64).to_le_bytes())?;
    write_checkpoint(&model.net, w)
}

pub fn read_surrogate<R: Read>(r: &mut R) -> Result<SurrogateModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SURROGATE_MAGIC {
        return Err(Error::config(format!(
            "bad surrogate magic {magic:?}, expected {SURROGATE_MAGIC:?}"
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let owner = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let round_built = u32::from_le_bytes(b4) as usize;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let owner_size = u64::from_le_bytes(b8) as usize;
    let net = read_checkpoint(r)?;
    if net.input_dim() != 2 || net.output_dim() != 1 {
        return Err(Error::dim("surrogate net must map 2 -> 1"));
    }
    Ok(SurrogateModel {
        net,
        owner,
        round_built,
        owner_size,
    })
}

pub fn save_surrogate(model: &SurrogateModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_surrogate(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_surrogate(path: &Path) -> Result<SurrogateModel> {
    let mut r = BufReader::new(File::open(path)?);
    read_surrogate(&mut r)
}
