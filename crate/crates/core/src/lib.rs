//! Continual fine-tuning of LoRA adapters with tracked functional directions.
//!
//! Each optimizer step turns the LoRA gradients into the output increment they
//! would cause in every adapted layer. A streaming PCA keeps a pool of
//! principal directions of those increments, updated as they drift. Before the
//! step is applied, the `B` gradients are cut orthogonal to the directions
//! learned on earlier tasks, so new tasks stop overwriting old ones.

// `!(x > 0.0)` checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod checkpoint;
pub mod direction;
pub mod drift;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod pca;
pub mod projector;
pub mod selftest;
pub mod task;
pub mod trainer;

pub use adapter::{Activation, GradientBundle, LoraAdapter, NetworkShape, ToyNetwork};
pub use direction::{CoordinateVector, FunctionalDirection};
pub use drift::{DriftProbe, ProbeSettings};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, ExperimentSummary};
pub use metrics::{AccuracyMatrix, Summary};
pub use pca::{ComponentPool, PcaParams, UpdateReport};
pub use projector::SliceBasis;
pub use selftest::{SelftestConfig, SelftestReport};
pub use task::{TaskData, TaskSpec};
pub use trainer::{Learner, Method, RunConfig, RunRecord, StepLog};
