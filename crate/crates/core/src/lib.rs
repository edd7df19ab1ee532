//! Federated neighbor embedding on simulated non-IID clients.
//!
//! The library trains a shared parametric 2D embedding model across clients
//! that never exchange raw data. Each client optimizes the contrastive
//! neighbor-embedding loss on its local kNN graph; the full method adds two
//! pieces on top of plain federated averaging:
//!
//! - a per-client *surrogate repulsion model* (a tiny MLP over 2D points)
//!   that other clients query during local training to recover the missing
//!   inter-client repulsive forces, and
//! - *intra-client data mixing*, which densifies sparse local neighborhoods
//!   by interpolating points with their local nearest neighbors.
//!
//! Modules map onto the moving parts: [`nn`] is the dense-network engine,
//! [`geometry`] holds datasets, distances and kNN graphs, [`objective`] the
//! attraction/repulsion loss, [`augment`] the data mixing, [`surrogate`] the
//! repulsion surrogates, [`federation`] the round-based simulation with all
//! baselines, [`metrics`] the embedding quality scores, and [`io`] file
//! formats plus synthetic data generation.

pub mod augment;
pub mod error;
pub mod matrix;
pub mod federation;
pub mod geometry;
pub mod io;

pub mod metrics;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod surrogate;

pub use error::{Error, Result};
