//! Streaming principal components with drift tracking.
//!
//! A covariance-free incremental PCA (CCIPCA) variant: each component `v` is
//! stored unnormalized so that `|v|` estimates its eigenvalue. Every update
//! blends the component towards `h* (h* . v) / |v|` with weight `1 - eta`,
//! where `eta = (t - l) / (t + 1) * (1 - eps)` uses the component's own age
//! `t`, the amnesic factor `l` and the tracking factor `eps`. The residual `h*`
//! is deflated through every component in order; if what remains is still
//! larger than `delta * |h|` and the pool has room, it becomes a new component.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::direction::{FunctionalDirection, DIRECTION_NORM_FLOOR};
use crate::error::{Error, Result};

/// Residual norm below which the remaining components of a step are left alone.
pub const RESIDUAL_NORM_FLOOR: f64 = 1e-12;

/// Tuning knobs of the tracker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaParams {
    /// Amnesic factor `l >= 0`.
    pub amnesic: f64,
    /// Initial tracking factor `eps` in `[0, 1)`.
    pub tracking_eps: f64,
    /// Upper bound used by [`ComponentPool::adjust_tracking`].
    pub tracking_cap: f64,
    /// Residual threshold `delta` in `(0, 1)` for appending components.
    pub residual_delta: f64,
}

impl Default for PcaParams {
    fn default() -> Self {
        Self {
            amnesic: 2.0,
            tracking_eps: 0.0,
            tracking_cap: 0.1,
            residual_delta: 0.1,
        }
    }
}

impl PcaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.amnesic >= 0.0 && self.amnesic.is_finite()) {
            return Err(Error::Validation(format!("amnesic factor must be >= 0, got {}", self.amnesic)));
        }
        if !(0.0..1.0).contains(&self.tracking_eps) || !(0.0..1.0).contains(&self.tracking_cap) {
            return Err(Error::Validation("tracking factor must lie in [0, 1)".into()));
        }
        if !(self.residual_delta > 0.0 && self.residual_delta < 1.0) {
            return Err(Error::Validation(format!(
                "residual threshold must lie in (0, 1), got {}",
                self.residual_delta
            )));
        }
        Ok(())
    }
}

/// Outcome of one [`ComponentPool::update`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateReport {
    /// `|h*| / |h|` after deflation.
    pub residual_rate: f64,
    pub appended: bool,
    pub components_after: usize,
    /// Blend weight applied to the oldest component (0 when the pool was empty).
    pub eta_used: f64,
}

/// Ordered set of unnormalized principal components.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentPool {
    components: Vec<DVector<f64>>,
    ages: Vec<u32>,
    creation_task: Vec<u32>,
    dim: usize,
    k_max: usize,
    params: PcaParams,
    frozen: bool,
}

impl ComponentPool {
    pub fn new(dim: usize, k_max: usize, params: PcaParams) -> Self {
        Self {
            components: Vec::new(),
            ages: Vec::new(),
            creation_task: Vec::new(),
            dim,
            k_max,
            params,
            frozen: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn components(&self) -> &[DVector<f64>] {
        &self.components
    }

    pub fn ages(&self) -> &[u32] {
        &self.ages
    }

    pub fn creation_tasks(&self) -> &[u32] {
        &self.creation_task
    }

    pub fn params(&self) -> &PcaParams {
        &self.params
    }

    pub fn tracking_eps(&self) -> f64 {
        self.params.tracking_eps
    }

    pub fn set_tracking_eps(&mut self, eps: f64) {
        self.params.tracking_eps = eps;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// Appends a component directly, bypassing the update rule.
    pub fn push_component(&mut self, v: DVector<f64>, age: u32, creation_task: u32) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::shape("push_component", self.dim, v.len()));
        }
        if self.components.len() >= self.k_max {
            return Err(Error::Validation(format!("pool is at capacity {}", self.k_max)));
        }
        if !(v.norm() > 0.0) || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invariant("component must have finite nonzero norm".into()));
        }
        self.components.push(v);
        self.ages.push(age);
        self.creation_task.push(creation_task);
        Ok(())
    }

    /// Blend weight for a component of age `t` under the current parameters.
    pub fn eta(&self, age: u32) -> f64 {
        let t = age as f64;
        let l = self.params.amnesic;
        ((t - l) / (t + 1.0) * (1.0 - self.params.tracking_eps)).clamp(0.0, 1.0)
    }

    /// Feeds one functional direction into the tracker.
    ///
    /// Returns `Ok(None)` when `|h|` is too small to carry a direction; the pool is
    /// untouched in that case. A frozen pool reports read-only statistics.
    pub fn update(&mut self, h: &FunctionalDirection, task: u32) -> Result<Option<UpdateReport>> {
        self.update_vector(&h.data, task)
    }

    pub fn update_vector(&mut self, h: &DVector<f64>, task: u32) -> Result<Option<UpdateReport>> {
        if h.len() != self.dim {
            return Err(Error::shape("ComponentPool::update", self.dim, h.len()));
        }
        let h_norm = h.norm();
        if !(h_norm >= DIRECTION_NORM_FLOOR) {
            return Ok(None);
        }
        let eta_used = self.ages.first().map_or(0.0, |&t| self.eta(t));
        if self.frozen {
            return Ok(Some(UpdateReport {
                residual_rate: self.deflate(h).norm() / h_norm,
                appended: false,
                components_after: self.len(),
                eta_used,
            }));
        }

        let mut residual = h.clone();
        for k in 0..self.components.len() {
            if residual.norm() < RESIDUAL_NORM_FLOOR {
                break;
            }
            let eta = self.eta(self.ages[k]);
            let v = &self.components[k];
            let v_norm = v.norm();
            let pull = residual.dot(v) / v_norm;
            let updated = v * eta + &residual * ((1.0 - eta) * pull);
            let updated_norm = updated.norm();
            // An exactly orthogonal residual with eta = 0 would zero the component.
            if updated_norm > 0.0 && updated_norm.is_finite() {
                self.components[k] = updated;
            }
            let v = &self.components[k];
            let coef = residual.dot(v) / v.norm_squared();
            residual.axpy(-coef, v, 1.0);
            self.ages[k] += 1;
        }

        let residual_rate = residual.norm() / h_norm;
        let appended = self.components.len() < self.k_max && residual_rate > self.params.residual_delta;
        if appended {
            self.components.push(residual);
            self.ages.push(0);
            self.creation_task.push(task);
        }
        Ok(Some(UpdateReport {
            residual_rate,
            appended,
            components_after: self.len(),
            eta_used,
        }))
    }

    /// `|h*| / |h|` against the current components, without mutating anything.
    pub fn residual_rate(&self, h: &DVector<f64>) -> Result<f64> {
        if h.len() != self.dim {
            return Err(Error::shape("ComponentPool::residual_rate", self.dim, h.len()));
        }
        let h_norm = h.norm();
        if !(h_norm > 0.0) {
            return Err(Error::Validation("residual rate of a zero vector is undefined".into()));
        }
        Ok(self.deflate(h).norm() / h_norm)
    }

    fn deflate(&self, h: &DVector<f64>) -> DVector<f64> {
        let mut residual = h.clone();
        for v in &self.components {
            let coef = residual.dot(v) / v.norm_squared();
            residual.axpy(-coef, v, 1.0);
        }
        residual
    }

    /// Proportional controller: `eps = cap * min(rate / delta, 1)`.
    pub fn adjust_tracking(&mut self, observed_residual_rate: f64) {
        let ratio = (observed_residual_rate / self.params.residual_delta).min(1.0);
        let cap = self.params.tracking_cap;
        self.params.tracking_eps = (cap * ratio).clamp(0.0, cap);
    }

    /// Grows the component budget at a task boundary.
    pub fn raise_cap(&mut self, increment: usize) {
        self.k_max += increment;
    }

    /// Rebuilds a pool from stored parts (checkpoint loading).
    pub(crate) fn from_parts(
        dim: usize,
        k_max: usize,
        params: PcaParams,
        entries: Vec<(u32, u32, DVector<f64>)>,
    ) -> Result<Self> {
        if entries.len() > k_max {
            return Err(Error::Validation(format!(
                "{} components exceed cap {k_max}",
                entries.len()
            )));
        }
        let mut pool = Self::new(dim, k_max, params);
        for (age, task, v) in entries {
            pool.push_component(v, age, task)?;
        }
        Ok(pool)
    }
}
