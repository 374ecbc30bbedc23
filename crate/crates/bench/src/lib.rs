//! Fixtures shared by the benchmarks.

use doc_tuner::pca::{ComponentPool, PcaParams};
use doc_tuner::task::{generate_task, TaskData, TaskSpec};
use doc_tuner::trainer::{Learner, Method, RunConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_vector(dim: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Pool of `count` random components, all created in task 0.
pub fn random_pool(dim: usize, count: usize, seed: u64) -> ComponentPool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = ComponentPool::new(dim, count, PcaParams::default());
    for _ in 0..count {
        pool.push_component(random_vector(dim, &mut rng), 10, 0)
            .expect("component fits the pool");
    }
    pool
}

/// Default-config learner, already trained on one task, plus a second task to keep training on.
pub fn warm_learner(method: Method, steps: usize) -> (Learner, TaskData) {
    let cfg = RunConfig {
        method,
        steps_per_task: steps,
        ..RunConfig::default()
    };
    let shape = cfg.network;
    let mut learner = Learner::new(cfg).expect("default config is valid");
    let first = generate_task(&TaskSpec::for_stream(0, 0, shape.input_dim, shape.class_count))
        .expect("valid task");
    learner.train_task(&first, 1).expect("training succeeds");
    let second = generate_task(&TaskSpec::for_stream(0, 1, shape.input_dim, shape.class_count))
        .expect("valid task");
    (learner, second)
}
