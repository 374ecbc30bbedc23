//! Convergence check of the component tracker on a stationary Gaussian stream.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pca::{ComponentPool, PcaParams};
use crate::task::random_orthogonal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestConfig {
    pub dim: usize,
    /// Leading eigenvalues; the rest of the spectrum is 1.
    pub leading_eigenvalues: Vec<f64>,
    pub samples: usize,
    pub components: usize,
    pub amnesic: f64,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for SelftestConfig {
    fn default() -> Self {
        Self {
            dim: 20,
            leading_eigenvalues: vec![10.0, 5.0, 2.0],
            samples: 5000,
            components: 3,
            amnesic: 2.0,
            seed: 0,
            threshold: 0.98,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    /// `|cos|` between tracked component `k` and the `k`-th batch eigenvector.
    pub cosines: Vec<f64>,
    /// Batch eigenvalues of the sample covariance, descending.
    pub oracle_eigenvalues: Vec<f64>,
    /// `|v_k|` of the tracked components.
    pub tracked_norms: Vec<f64>,
    pub passed: bool,
}

/// Streams `samples` Gaussian vectors with a known spectrum through a pool with
/// `eps = 0` and compares against batch PCA of the very same samples.
pub fn pca_selftest(cfg: &SelftestConfig) -> Result<SelftestReport> {
    if cfg.leading_eigenvalues.len() > cfg.dim || cfg.components == 0 || cfg.components > cfg.dim || cfg.samples == 0 {
        return Err(Error::Validation(format!("inconsistent self-test config {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let basis = random_orthogonal(cfg.dim, &mut rng);
    let scales = DVector::from_fn(cfg.dim, |i, _| cfg.leading_eigenvalues.get(i).copied().unwrap_or(1.0).sqrt());

    let params = PcaParams {
        amnesic: cfg.amnesic,
        tracking_eps: 0.0,
        ..PcaParams::default()
    };
    params.validate()?;
    let mut pool = ComponentPool::new(cfg.dim, cfg.components, params);
    let mut scatter = DMatrix::<f64>::zeros(cfg.dim, cfg.dim);
    for _ in 0..cfg.samples {
        let z = DVector::from_fn(cfg.dim, |i, _| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g * scales[i]
        });
        let h = &basis * z;
        scatter.ger(1.0, &h, &h, 1.0);
        pool.update_vector(&h, 0)?;
    }
    scatter /= cfg.samples as f64;

    let eig = SymmetricEigen::new(scatter);
    let mut order: Vec<usize> = (0..cfg.dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let cosines: Vec<f64> = order
        .iter()
        .take(cfg.components)
        .enumerate()
        .map(|(k, &idx)| {
            pool.components().get(k).map_or(0.0, |v| {
                let u = eig.eigenvectors.column(idx);
                (v.dot(&u) / v.norm()).abs()
            })
        })
        .collect();
    let passed = cosines.len() == cfg.components && cosines.iter().all(|&c| c >= cfg.threshold);
    Ok(SelftestReport {
        cosines,
        oracle_eigenvalues: order.iter().map(|&i| eig.eigenvalues[i]).collect(),
        tracked_norms: pool.components().iter().map(|v| v.norm()).collect(),
        passed,
    })
}
