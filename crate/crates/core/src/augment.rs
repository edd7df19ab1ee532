//! Intra-client data mixing: synthesize points on segments between a point
//! and one of its local nearest neighbors, densifying sparse local
//! neighborhoods before the training kNN graph is rebuilt.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::geometry::{Dataset, KnnGraph};
use crate::matrix::Matrix;

/// Mixing hyperparameters. `lambda ~ Beta(alpha, alpha)`; `ratio` synthetic
/// points are generated per original point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixingConfig {
    pub alpha: f64,
    pub ratio: f64,
}

impl Default for MixingConfig {
    fn default() -> Self {
        MixingConfig {
            alpha: 0.2,
            ratio: 1.0,
        }
    }
}

impl MixingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::config(format!("mixing alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.ratio >= 0.0) {
            return Err(Error::config(format!("mixing ratio must be >= 0, got {}", self.ratio)));
        }
        Ok(())
    }
}

/// Convex interpolation `lambda * x_i + (1 - lambda) * x_j`.
pub fn mix_point(x_i: &[f64], x_j: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if x_i.len() != x_j.len() {
        return Err(Error::dim(format!(
            "mix_point: {} vs {} dims",
            x_i.len(),
            x_j.len()
        )));
    }
    Ok(x_i
        .iter()
        .zip(x_j)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect())
}

fn sample_lambda<R: Rng>(beta: &Beta<f64>, rng: &mut R) -> f64 {
    // Beta(a, a) with small a concentrates mass at the endpoints; guard the
    // exact 0/1 draws that can appear through rounding.
    for _ in 0..8 {
        let l = beta.sample(rng);
        if l > 0.0 && l < 1.0 {
            return l;
        }
    }
    0.5
}

/// Appends `round(ratio * N)` synthetic points to the dataset. Anchors cycle
/// round-robin over the originals; the partner is a uniform draw from the
/// anchor's neighbor list in `graph` (built over the original data). The
/// originals are preserved verbatim and first; synthetic points inherit the
/// anchor's label and take fresh ids above the existing maximum.
pub fn augment_client<R: Rng>(
    data: &Dataset,
    graph: &KnnGraph,
    cfg: &MixingConfig,
    rng: &mut R,
) -> Result<Dataset> {
    cfg.validate()?;
    let n = data.len();
    if graph.num_points() != n {
        return Err(Error::dim(format!(
            "augment_client: graph has {} points, dataset {}",
            graph.num_points(),
            n
        )));
    }
    let num_synthetic = (cfg.ratio * n as f64).round() as usize;
    if num_synthetic == 0 || graph.k == 0 {
        return Ok(data.clone());
    }
    let beta = Beta::new(cfg.alpha, cfg.alpha)
        .map_err(|e| Error::config(format!("Beta({0}, {0}): {e}", cfg.alpha)))?;

    let d = data.dim();
    let mut points = Matrix::zeros(n + num_synthetic, d);
    for i in 0..n {
        points.row_mut(i).copy_from_slice(data.points.row(i));
    }
    let mut labels = data.labels.clone();
    let mut ids = data.ids.clone();
    let mut next_id = data.ids.iter().copied().max().unwrap_or(0) + 1;

    for s in 0..num_synthetic {
        let anchor = s % n;
        let nbrs = &graph.neighbors[anchor];
        let j = nbrs[rng.random_range(0..nbrs.len())] as usize;
        let lambda = sample_lambda(&beta, rng);
        let mixed = mix_point(data.points.row(anchor), data.points.row(j), lambda)?;
        points.row_mut(n + s).copy_from_slice(&mixed);
        labels.push(data.labels[anchor]);
        ids.push(next_id);
        next_id += 1;
    }
    Dataset::new(points, labels, ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_knn;
    use crate::matrix::sq_dist;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(n: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        Dataset::from_points(Matrix::from_rows(&rows).unwrap(), vec![1; n]).unwrap()
    }

    #[test]
    fn mix_point_endpoints_and_midpoint() {
        let xi = vec![0.0, 0.0];
        let xj = vec![2.0, 4.0];
        assert_eq!(mix_point(&xi, &xj, 1.0).unwrap(), xi);
        assert_eq!(mix_point(&xi, &xj, 0.5).unwrap(), vec![1.0, 2.0]);
        assert!(mix_point(&xi, &[1.0], 0.5).is_err());
    }

    #[test]
    fn mix_point_is_collinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let xi: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let xj: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let l: f64 = rng.random_range(0.0..1.0);
            let m = mix_point(&xi, &xj, l).unwrap();
            let total = sq_dist(&xi, &xj).sqrt();
            let split = sq_dist(&m, &xi).sqrt() + sq_dist(&m, &xj).sqrt();
            assert!((total - split).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_ratio_is_identity() {
        let data = random_dataset(30, 5, 3);
        let graph = build_knn(&data, 4).unwrap();
        let cfg = MixingConfig {
            alpha: 0.2,
            ratio: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment_client(&data, &graph, &cfg, &mut rng).unwrap();
        assert_eq!(out, data);
    }

    #[test]
    fn ratio_one_doubles_and_preserves_originals() {
        let data = random_dataset(100, 5, 9);
        let graph = build_knn(&data, 7).unwrap();
        let cfg = MixingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment_client(&data, &graph, &cfg, &mut rng).unwrap();
        assert_eq!(out.len(), 200);
        for i in 0..100 {
            assert_eq!(out.points.row(i), data.points.row(i));
            assert_eq!(out.labels[i], data.labels[i]);
            assert_eq!(out.ids[i], data.ids[i]);
        }
        // Fresh ids are unique (Dataset::new checks), above the originals.
        for i in 100..200 {
            assert!(out.ids[i] >= 100);
        }
    }

    #[test]
    fn synthetic_points_stay_within_anchor_neighborhood() {
        let data = random_dataset(60, 4, 21);
        let k = 5;
        let graph = build_knn(&data, k).unwrap();
        let cfg = MixingConfig {
            alpha: 0.2,
            ratio: 2.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = augment_client(&data, &graph, &cfg, &mut rng).unwrap();
        let n = data.len();
        for s in 0..(out.len() - n) {
            let anchor = s % n;
            let kth = *graph.neighbors[anchor].last().unwrap() as usize;
            let kth_dist = sq_dist(data.points.row(anchor), data.points.row(kth));
            let syn_dist = sq_dist(out.points.row(n + s), data.points.row(anchor));
            assert!(
                syn_dist <= kth_dist + 1e-12,
                "synthetic {s} left its anchor's neighborhood"
            );
            assert_eq!(out.labels[n + s], data.labels[anchor]);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let data = random_dataset(40, 3, 5);
        let graph = build_knn(&data, 3).unwrap();
        let cfg = MixingConfig::default();
        let a = augment_client(&data, &graph, &cfg, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let b = augment_client(&data, &graph, &cfg, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn beta_draws_match_symmetric_moments() {
        let beta = Beta::new(0.2, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 100_000;
        let mut sum = 0.0;
        let mut in_range = true;
        for _ in 0..n {
            let l = sample_lambda(&beta, &mut rng);
            in_range &= l > 0.0 && l < 1.0;
            sum += l;
        }
        assert!(in_range);
        let mean = sum / n as f64;
        // Var of Beta(0.2, 0.2) = 0.25/1.4; 3 sigma of the sample mean.
        let sd = (0.25 / 1.4f64 / n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * sd, "mean = {mean}");
    }

    #[test]
    fn invalid_config_rejected() {
        let data = random_dataset(10, 2, 1);
        let graph = build_knn(&data, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = MixingConfig {
            alpha: 0.0,
            ratio: 1.0,
        };
        assert!(augment_client(&data, &graph, &bad, &mut rng).is_err());
    }
}
