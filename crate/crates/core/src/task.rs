//! Synthetic continual-learning tasks: rotated Gaussian mixtures.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default per-coordinate noise around each cluster center.
pub const DEFAULT_NOISE: f64 = 0.3;

/// Everything needed to regenerate one task deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u32,
    pub seed: u64,
    pub rotation_seed: u64,
    pub input_dim: usize,
    pub class_count: usize,
    pub samples_train: usize,
    pub samples_eval: usize,
    pub noise: f64,
}

/// Labeled samples stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub inputs: DMatrix<f64>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Columns `indices` as a batch.
    pub fn gather(&self, indices: &[usize]) -> (DMatrix<f64>, Vec<usize>) {
        let x = self.inputs.select_columns(indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task_id: u32,
    pub train: Split,
    pub eval: Split,
}

/// SplitMix64 finalizer; derives independent seeds from a base seed.
pub fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with sign fix).
pub fn random_orthogonal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<f64> {
    let g: DMatrix<f64> = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

impl TaskSpec {
    /// Task `index` of a stream, with seeds derived from the stream seed.
    pub fn for_stream(stream_seed: u64, index: u32, input_dim: usize, class_count: usize) -> Self {
        Self {
            task_id: index,
            seed: mix_seed(stream_seed, index as u64 + 1, 1),
            rotation_seed: mix_seed(stream_seed, index as u64 + 1, 2),
            input_dim,
            class_count,
            samples_train: 2000,
            samples_eval: 1000,
            noise: DEFAULT_NOISE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.class_count < 2 || self.samples_train == 0 || self.samples_eval == 0 {
            return Err(Error::Validation(format!("degenerate task spec {self:?}")));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Validation(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Cluster centers on the unit sphere, isotropic noise, then a task rotation.
pub fn generate_task(spec: &TaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<DVector<f64>> = (0..spec.class_count)
        .map(|_| loop {
            let c: DVector<f64> = DVector::from_fn(spec.input_dim, |_, _| StandardNormal.sample(&mut rng));
            let n = c.norm();
            if n > 1e-12 {
                break c / n;
            }
        })
        .collect();
    let mut rot_rng = ChaCha8Rng::seed_from_u64(spec.rotation_seed);
    let rotation = random_orthogonal(spec.input_dim, &mut rot_rng);

    let mut sample = |n: usize| {
        let mut raw = DMatrix::zeros(spec.input_dim, n);
        let mut labels = Vec::with_capacity(n);
        for j in 0..n {
            let label = rng.random_range(0..spec.class_count);
            for i in 0..spec.input_dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                raw[(i, j)] = centers[label][i] + spec.noise * z;
            }
            labels.push(label);
        }
        Split {
            inputs: &rotation * raw,
            labels,
        }
    };
    let train = sample(spec.samples_train);
    let eval = sample(spec.samples_eval);
    Ok(TaskData {
        task_id: spec.task_id,
        train,
        eval,
    })
}
