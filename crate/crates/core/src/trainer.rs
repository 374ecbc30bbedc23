//! Sequential training over a task stream, with and without orthogonal cuts.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{GradientBundle, NetworkShape, ToyNetwork};
use crate::checkpoint::encode_checkpoint;
use crate::direction::{network_direction, slice_offsets, DIRECTION_NORM_FLOOR};
use crate::error::{Error, Result};
use crate::metrics::AccuracyMatrix;
use crate::pca::{ComponentPool, PcaParams};
use crate::projector::{cut_gradient, disassemble, verify_orthogonality};
use crate::task::{generate_task, mix_seed, Split, TaskData, TaskSpec};

/// Training arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Tracked components with orthogonal `B` cuts.
    Doc,
    /// Plain sequential LoRA fine-tuning.
    SeqLora,
    /// Like `Doc`, but components stop updating after the first steps of each task.
    DocAblation,
    /// Fresh network per task; yields the isolated-training references.
    PerTaskReference,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Doc, Method::SeqLora, Method::DocAblation, Method::PerTaskReference];

    pub fn name(self) -> &'static str {
        match self {
            Method::Doc => "doc",
            Method::SeqLora => "seq_lora",
            Method::DocAblation => "doc_ablation",
            Method::PerTaskReference => "per_task_reference",
        }
    }

    pub fn uses_pool(self) -> bool {
        matches!(self, Method::Doc | Method::DocAblation)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s || m.name().replace('_', "-") == s)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "unknown method {s:?} (expected one of doc, seq_lora, doc_ablation, per_task_reference)"
                ))
            })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Hyperparameters of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub lr: f64,
    pub batch_size: usize,
    pub steps_per_task: usize,
    pub network: NetworkShape,
    pub pca: PcaParams,
    /// Component budget added at every task boundary.
    pub cap_increment: usize,
    /// Fraction of each task's steps during which the ablation arm still updates components.
    pub ablation_init_fraction: f64,
    pub seed: u64,
    /// Use the one-shot sum over raw slices instead of an orthonormalized basis.
    pub literal_cut_mode: bool,
    /// Cut only against components created in earlier tasks.
    pub historical_only: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Doc,
            lr: 0.02,
            batch_size: 16,
            steps_per_task: 500,
            network: NetworkShape::default(),
            pca: PcaParams::default(),
            cap_increment: 48,
            ablation_init_fraction: 0.1,
            seed: 0,
            literal_cut_mode: false,
            historical_only: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.steps_per_task == 0 || self.batch_size == 0 {
            return Err(Error::Validation("steps_per_task and batch_size must be >= 1".into()));
        }
        if !(self.ablation_init_fraction > 0.0 && self.ablation_init_fraction <= 1.0) {
            return Err(Error::Validation(format!(
                "ablation_init_fraction must lie in (0, 1], got {}",
                self.ablation_init_fraction
            )));
        }
        self.network.validate()?;
        self.pca.validate()
    }

    /// Number of steps per task during which the ablation arm updates components.
    pub fn ablation_init_steps(&self) -> usize {
        (self.ablation_init_fraction * self.steps_per_task as f64).ceil() as usize
    }
}

/// One optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// Global step, counted from 1.
    pub step: u64,
    /// 1-based task position in the stream.
    pub task: u32,
    pub loss: f64,
    /// `None` when the arm tracks no components or the increment was too small.
    pub residual_rate: Option<f64>,
    pub component_count: usize,
    pub k_max: usize,
    pub epsilon: f64,
    pub appended: bool,
    /// Largest normalized dot between an applied `B` column and the historical basis.
    pub cut_orthogonality: Option<f64>,
}

/// Counts training batches drawn per task; any draw from a finished task is a violation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccessAudit {
    pub batches_per_task: Vec<u64>,
    pub past_task_batches: u64,
    pub finished_tasks: Vec<u32>,
}

impl AccessAudit {
    fn record(&mut self, data_task: u32) {
        let idx = data_task as usize;
        if self.batches_per_task.len() <= idx {
            self.batches_per_task.resize(idx + 1, 0);
        }
        self.batches_per_task[idx] += 1;
        if self.finished_tasks.contains(&data_task) {
            self.past_task_batches += 1;
        }
    }

    fn finish(&mut self, task: u32) {
        if !self.finished_tasks.contains(&task) {
            self.finished_tasks.push(task);
        }
    }
}

/// Everything a finished stream produced.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: RunConfig,
    pub accuracy_matrix: AccuracyMatrix,
    pub logs: Vec<StepLog>,
    pub audit: AccessAudit,
    /// Checkpoint bytes taken after each task.
    pub checkpoints: Vec<Vec<u8>>,
    pub step_time: Duration,
}

impl RunRecord {
    pub fn losses(&self) -> Vec<f64> {
        self.logs.iter().map(|l| l.loss).collect()
    }

    pub fn mean_step_seconds(&self) -> f64 {
        if self.logs.is_empty() {
            0.0
        } else {
            self.step_time.as_secs_f64() / self.logs.len() as f64
        }
    }

    /// Worst cut orthogonality seen over the run.
    pub fn max_cut_orthogonality(&self) -> Option<f64> {
        self.logs
            .iter()
            .filter_map(|l| l.cut_orthogonality)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }
}

/// Network, tracker and counters that persist across tasks.
#[derive(Debug, Clone)]
pub struct Learner {
    pub config: RunConfig,
    pub net: ToyNetwork,
    pub pool: ComponentPool,
    pub step: u64,
    pub audit: AccessAudit,
    offsets: Vec<(usize, usize)>,
}

impl Learner {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let net = ToyNetwork::init(&config.network, mix_seed(config.seed, 0, 0xBA5E))?;
        let pool = ComponentPool::new(config.network.direction_dim(), 0, config.pca);
        Self::from_parts(config, net, pool, 0)
    }

    /// A learner whose updates are all zero (`lr = 0`); only the drift probe uses it.
    pub(crate) fn frozen(config: RunConfig) -> Result<Self> {
        let mut learner = Self::new(RunConfig { lr: 1.0, ..config })?;
        learner.config.lr = 0.0;
        Ok(learner)
    }

    /// Resumes from restored state; `step` is the global step count already done.
    pub fn from_parts(config: RunConfig, net: ToyNetwork, pool: ComponentPool, step: u64) -> Result<Self> {
        config.validate()?;
        let offsets = slice_offsets(&net.module_out_dims());
        if pool.dim() != config.network.direction_dim() || offsets.last().map(|o| o.0 + o.1) != Some(pool.dim()) {
            return Err(Error::shape("learner pool dimension", config.network.direction_dim(), pool.dim()));
        }
        Ok(Self {
            config,
            net,
            pool,
            step,
            audit: AccessAudit::default(),
            offsets,
        })
    }

    pub fn offsets(&self) -> &[(usize, usize)] {
        &self.offsets
    }

    /// Trains on one task. `position` is the 1-based place of the task in the stream.
    pub fn train_task(&mut self, data: &TaskData, position: u32) -> Result<Vec<StepLog>> {
        self.train_task_observed(data, position, &mut |_, _| Ok(()))
    }

    /// As [`Learner::train_task`], calling `observer` after every step.
    pub fn train_task_observed(
        &mut self,
        data: &TaskData,
        position: u32,
        observer: &mut dyn FnMut(&Learner, &StepLog) -> Result<()>,
    ) -> Result<Vec<StepLog>> {
        if position == 0 {
            return Err(Error::Validation("task positions are 1-based".into()));
        }
        if data.train.inputs.nrows() != self.net.input_dim() {
            return Err(Error::shape("task input dimension", self.net.input_dim(), data.train.inputs.nrows()));
        }
        if data.train.is_empty() {
            return Err(Error::Validation("task has no training samples".into()));
        }
        let cfg = self.config.clone();
        let method = cfg.method;
        let task_index = position - 1;
        if method.uses_pool() {
            self.pool.raise_cap(cfg.cap_increment);
            self.pool.unfreeze();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, data.task_id as u64 + 1, 0xBA7C));
        let init_steps = cfg.ablation_init_steps();
        let mut logs = Vec::with_capacity(cfg.steps_per_task);

        for local in 0..cfg.steps_per_task {
            if method == Method::DocAblation && local >= init_steps {
                self.pool.freeze();
            }
            let indices: Vec<usize> = (0..cfg.batch_size)
                .map(|_| rng.random_range(0..data.train.len()))
                .collect();
            self.audit.record(data.task_id);
            let (x, y) = data.train.gather(&indices);
            let (loss, mut grads) = self.net.loss_and_grads(&x, &y)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at step {} (task {position})",
                    self.step + 1
                )));
            }
            self.step += 1;

            let mut log = StepLog {
                step: self.step,
                task: position,
                loss,
                residual_rate: None,
                component_count: self.pool.len(),
                k_max: self.pool.k_max(),
                epsilon: self.pool.tracking_eps(),
                appended: false,
                cut_orthogonality: None,
            };
            if method.uses_pool() {
                self.track_and_cut(&mut grads, task_index, &mut log)?;
            }
            self.net.apply_update(&grads, cfg.lr)?;
            observer(self, &log)?;
            logs.push(log);
        }
        self.pool.unfreeze();
        self.audit.finish(data.task_id);
        Ok(logs)
    }

    /// Feeds the uncut increment to the tracker, then cuts every `B` gradient.
    fn track_and_cut(&mut self, grads: &mut GradientBundle, task_index: u32, log: &mut StepLog) -> Result<()> {
        let cfg = &self.config;
        let h = network_direction(&self.net, grads, cfg.lr, self.step)?;
        if h.norm() >= DIRECTION_NORM_FLOOR {
            if let Some(report) = self.pool.update(&h, task_index)? {
                log.residual_rate = Some(report.residual_rate);
                log.appended = report.appended;
                if !self.pool.is_frozen() {
                    self.pool.adjust_tracking(report.residual_rate);
                }
            }
        }
        log.component_count = self.pool.len();
        log.k_max = self.pool.k_max();
        log.epsilon = self.pool.tracking_eps();

        let bases = disassemble(&self.pool, &self.offsets, task_index, cfg.historical_only, !cfg.literal_cut_mode)?;
        let mut worst: Option<f64> = None;
        for (m, basis) in bases.iter().enumerate() {
            if basis.is_empty() {
                continue;
            }
            let cut = cut_gradient(&grads.grad_b[m], basis)?;
            if basis.orthonormalized {
                let score = verify_orthogonality(&cut, basis);
                worst = Some(worst.map_or(score, |w| w.max(score)));
            }
            grads.grad_b[m] = cut;
        }
        log.cut_orthogonality = worst;
        Ok(())
    }

    pub fn evaluate(&self, split: &Split) -> Result<f64> {
        self.net.accuracy(&split.inputs, &split.labels)
    }
}

fn validate_stream(cfg: &RunConfig, tasks: &[TaskSpec]) -> Result<()> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Validation("task stream is empty".into()));
    }
    for (i, t) in tasks.iter().enumerate() {
        t.validate()?;
        if t.input_dim != cfg.network.input_dim || t.class_count != cfg.network.class_count {
            return Err(Error::Validation(format!(
                "task {} has {}-dim inputs / {} classes but the network expects {} / {}",
                i + 1,
                t.input_dim,
                t.class_count,
                cfg.network.input_dim,
                cfg.network.class_count
            )));
        }
        if tasks[..i].iter().any(|o| o.task_id == t.task_id) {
            return Err(Error::Validation(format!("duplicate task id {}", t.task_id)));
        }
    }
    Ok(())
}

/// Trains `tasks` in order and fills the accuracy matrix after each one.
///
/// Only the current task's training split is alive while it trains; earlier
/// tasks keep their eval split alone.
pub fn run_stream(cfg: &RunConfig, tasks: &[TaskSpec]) -> Result<RunRecord> {
    validate_stream(cfg, tasks)?;
    let mut learner = Learner::new(cfg.clone())?;
    let fresh = learner.clone();
    let mut matrix = AccuracyMatrix::new(tasks.len());
    let mut evals: Vec<Split> = Vec::with_capacity(tasks.len());
    let mut logs = Vec::new();
    let mut checkpoints = Vec::new();
    let started = Instant::now();
    let mut eval_time = Duration::ZERO;

    for (i, spec) in tasks.iter().enumerate() {
        let position = i as u32 + 1;
        if cfg.method == Method::PerTaskReference {
            let step = learner.step;
            let audit = std::mem::take(&mut learner.audit);
            learner = fresh.clone();
            learner.step = step;
            learner.audit = audit;
        }
        let data = generate_task(spec)?;
        logs.extend(learner.train_task(&data, position)?);
        let TaskData { eval, .. } = data;
        evals.push(eval);

        let eval_start = Instant::now();
        for (t, split) in evals.iter().enumerate() {
            matrix.set(t + 1, i + 1, learner.evaluate(split)?)?;
        }
        eval_time += eval_start.elapsed();
        checkpoints.push(encode_checkpoint(&learner.net, &learner.pool)?);
    }

    Ok(RunRecord {
        config: cfg.clone(),
        accuracy_matrix: matrix,
        logs,
        audit: learner.audit,
        checkpoints,
        step_time: started.elapsed().saturating_sub(eval_time),
    })
}

/// Eval accuracy of a fresh network trained on each task in isolation.
pub fn reference_accuracies(cfg: &RunConfig, tasks: &[TaskSpec]) -> Result<Vec<f64>> {
    validate_stream(cfg, tasks)?;
    let reference_cfg = RunConfig {
        method: Method::SeqLora,
        ..cfg.clone()
    };
    tasks
        .iter()
        .map(|spec| {
            let mut learner = Learner::new(reference_cfg.clone())?;
            let data = generate_task(spec)?;
            learner.train_task(&data, 1)?;
            learner.evaluate(&data.eval)
        })
        .collect()
}

/// Continues a stream from a checkpoint taken after `completed` tasks.
///
/// Returns the step logs of the remaining tasks.
pub fn resume_stream(
    cfg: &RunConfig,
    tasks: &[TaskSpec],
    checkpoint: &[u8],
    completed: usize,
    steps_done: u64,
) -> Result<Vec<StepLog>> {
    validate_stream(cfg, tasks)?;
    if completed > tasks.len() {
        return Err(Error::Validation(format!("{completed} completed tasks exceed a stream of {}", tasks.len())));
    }
    let (net, pool) = crate::checkpoint::decode_checkpoint(checkpoint, cfg.network.activation)?;
    let mut learner = Learner::from_parts(cfg.clone(), net, pool, steps_done)?;
    learner.audit.finished_tasks = tasks[..completed].iter().map(|t| t.task_id).collect();
    let mut logs = Vec::new();
    for (i, spec) in tasks.iter().enumerate().skip(completed) {
        let data = generate_task(spec)?;
        logs.extend(learner.train_task(&data, i as u32 + 1)?);
    }
    Ok(logs)
}
