//! Drift probes: how the functional direction of fixed task-1 samples moves
//! while later tasks train.
//!
//! At every probe point each anchor sample contributes
//! - the cosine between its current LoRA gradient and the one at the first probe,
//! - the cosine between its current gradient and the running mean of its gradients,
//! - once task 1 has finished, the cosine between the coordinates of its current
//!   increment and its coordinates at the end of task 1, measured both in the
//!   live (tracked) pool and in a copy of the pool frozen at the end of task 1.
//!
//! The mean cosine between current `B` columns and those at the end of task 1
//! is recorded alongside.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::direction::{coord, network_direction};
use crate::error::{Error, Result};
use crate::pca::ComponentPool;
use crate::task::{generate_task, TaskSpec};
use crate::trainer::{Learner, RunConfig, StepLog};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    pub anchors: usize,
    /// Probe every this many steps (and at every task end).
    pub interval: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            anchors: 8,
            interval: 10,
        }
    }
}

/// Mean and population standard deviation of the values that were defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[Option<f64>]) -> Option<Stat> {
        let vals: Vec<f64> = values.iter().flatten().copied().collect();
        if vals.is_empty() {
            return None;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Stat {
            mean,
            std: var.sqrt(),
            count: vals.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftPoint {
    pub step: u64,
    pub task: u32,
    pub grad_vs_first: Vec<Option<f64>>,
    pub grad_vs_mean: Vec<Option<f64>>,
    pub b_column_similarity: Option<f64>,
    pub coord_tracked: Vec<Option<f64>>,
    pub coord_frozen: Vec<Option<f64>>,
    /// Anchors skipped at this point because their gradient vanished.
    pub excluded: Vec<usize>,
}

impl DriftPoint {
    pub fn grad_vs_first_stat(&self) -> Option<Stat> {
        Stat::of(&self.grad_vs_first)
    }

    pub fn grad_vs_mean_stat(&self) -> Option<Stat> {
        Stat::of(&self.grad_vs_mean)
    }

    pub fn coord_tracked_stat(&self) -> Option<Stat> {
        Stat::of(&self.coord_tracked)
    }

    pub fn coord_frozen_stat(&self) -> Option<Stat> {
        Stat::of(&self.coord_frozen)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftProbe {
    /// Eval-split indices of the task-1 anchors.
    pub anchor_indices: Vec<usize>,
    pub points: Vec<DriftPoint>,
}

impl DriftProbe {
    /// Last probe point taken while `task` (1-based) was training.
    pub fn end_of_task(&self, task: u32) -> Option<&DriftPoint> {
        self.points.iter().rev().find(|p| p.task == task)
    }
}

/// Cosine clamped to `[-1, 1]`. Identical vectors give 1 (also when zero);
/// otherwise a zero vector gives `None`.
pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> Option<f64> {
    if a == b {
        return Some(1.0);
    }
    let denom = a.norm() * b.norm();
    if denom == 0.0 || !denom.is_finite() {
        return None;
    }
    Some((a.dot(b) / denom).clamp(-1.0, 1.0))
}

fn prefix_cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n == 0 {
        return None;
    }
    cosine(&DVector::from_column_slice(&a[..n]), &DVector::from_column_slice(&b[..n]))
}

struct Anchor {
    x: DMatrix<f64>,
    y: usize,
    first: Option<DVector<f64>>,
    grad_sum: Option<DVector<f64>>,
    probes: usize,
    reference_coord: Option<Vec<f64>>,
}

struct ProbeState {
    anchors: Vec<Anchor>,
    frozen_pool: Option<ComponentPool>,
    reference_b: Option<Vec<DMatrix<f64>>>,
    points: Vec<DriftPoint>,
}

impl ProbeState {
    fn take_point(&mut self, learner: &Learner, step: u64, task: u32) -> Result<()> {
        let n = self.anchors.len();
        let mut point = DriftPoint {
            step,
            task,
            grad_vs_first: vec![None; n],
            grad_vs_mean: vec![None; n],
            b_column_similarity: None,
            coord_tracked: vec![None; n],
            coord_frozen: vec![None; n],
            excluded: Vec::new(),
        };
        for (i, anchor) in self.anchors.iter_mut().enumerate() {
            let (_, grads) = learner.net.loss_and_grads(&anchor.x, &[anchor.y])?;
            let g = grads.flatten();
            if g.norm() == 0.0 {
                point.excluded.push(i);
                continue;
            }
            let first = anchor.first.get_or_insert_with(|| g.clone());
            point.grad_vs_first[i] = cosine(&g, first);
            let sum = anchor.grad_sum.get_or_insert_with(|| DVector::zeros(g.len()));
            *sum += &g;
            anchor.probes += 1;
            let mean = &*sum / anchor.probes as f64;
            point.grad_vs_mean[i] = cosine(&g, &mean);

            if let (Some(frozen), Some(reference)) = (&self.frozen_pool, &anchor.reference_coord) {
                let h = network_direction(&learner.net, &grads, learner.config.lr, step)?;
                let tracked = coord(&learner.pool, &h)?;
                let still = coord(frozen, &h)?;
                point.coord_tracked[i] = prefix_cosine(&tracked.projections, reference);
                point.coord_frozen[i] = prefix_cosine(&still.projections, reference);
            }
        }
        if let Some(reference) = &self.reference_b {
            let mut sims = Vec::new();
            for (ad, b0) in learner.net.adapters().iter().zip(reference) {
                for (col, col0) in ad.factor_b().column_iter().zip(b0.column_iter()) {
                    sims.push(cosine(&col.into_owned(), &col0.into_owned()));
                }
            }
            point.b_column_similarity = Stat::of(&sims).map(|s| s.mean);
        }
        self.points.push(point);
        Ok(())
    }

    /// Freezes a copy of the pool and records reference coordinates and `B` columns.
    fn mark_reference(&mut self, learner: &Learner) -> Result<()> {
        let mut frozen = learner.pool.clone();
        frozen.freeze();
        for anchor in &mut self.anchors {
            let (_, grads) = learner.net.loss_and_grads(&anchor.x, &[anchor.y])?;
            let h = network_direction(&learner.net, &grads, learner.config.lr, learner.step)?;
            anchor.reference_coord = Some(coord(&frozen, &h)?.projections);
        }
        self.frozen_pool = Some(frozen);
        self.reference_b = Some(learner.net.adapters().iter().map(|a| a.factor_b().clone()).collect());
        Ok(())
    }
}

/// Trains `tasks` in order under `cfg` while probing fixed task-1 eval samples.
pub fn drift_probe(cfg: &RunConfig, tasks: &[TaskSpec], settings: &ProbeSettings) -> Result<DriftProbe> {
    if tasks.is_empty() {
        return Err(Error::Validation("drift probe needs at least one task".into()));
    }
    if settings.interval == 0 {
        return Err(Error::Validation("probe interval must be >= 1".into()));
    }
    // lr = 0 is accepted here as a frozen-network control.
    let mut learner = if cfg.lr == 0.0 {
        Learner::frozen(cfg.clone())?
    } else {
        Learner::new(cfg.clone())?
    };
    let first = generate_task(&tasks[0])?;
    let count = settings.anchors.min(first.eval.len());
    let anchor_indices: Vec<usize> = (0..count).collect();
    let mut state = ProbeState {
        anchors: anchor_indices
            .iter()
            .map(|&i| Anchor {
                x: first.eval.inputs.columns(i, 1).into_owned(),
                y: first.eval.labels[i],
                first: None,
                grad_sum: None,
                probes: 0,
                reference_coord: None,
            })
            .collect(),
        frozen_pool: None,
        reference_b: None,
        points: Vec::new(),
    };
    drop(first);

    state.take_point(&learner, 0, 1)?;
    for (i, spec) in tasks.iter().enumerate() {
        let position = i as u32 + 1;
        let data = generate_task(spec)?;
        let steps = cfg.steps_per_task as u64;
        let task_start = learner.step;
        let mut observer = |l: &Learner, log: &StepLog| -> Result<()> {
            let local = log.step - task_start;
            if log.step.is_multiple_of(settings.interval) || local == steps {
                state.take_point(l, log.step, position)?;
            }
            Ok(())
        };
        learner.train_task_observed(&data, position, &mut observer)?;
        if position == 1 {
            state.mark_reference(&learner)?;
        }
    }
    Ok(DriftProbe {
        anchor_indices,
        points: state.points,
    })
}

impl DriftProbe {
    /// One row per (probe point, series): `step,task,series,mean,std,count`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["step", "task", "series", "mean", "std", "count"])?;
        for p in &self.points {
            let b = p.b_column_similarity.map(|m| Stat { mean: m, std: 0.0, count: 1 });
            let series = [
                ("grad_vs_first", p.grad_vs_first_stat()),
                ("grad_vs_mean", p.grad_vs_mean_stat()),
                ("b_column_similarity", b),
                ("coord_tracked", p.coord_tracked_stat()),
                ("coord_frozen", p.coord_frozen_stat()),
            ];
            for (name, stat) in series {
                if let Some(s) = stat {
                    w.write_record([
                        p.step.to_string(),
                        p.task.to_string(),
                        name.to_string(),
                        s.mean.to_string(),
                        s.std.to_string(),
                        s.count.to_string(),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("drift.csv", e))?;
        Ok(())
    }
}
