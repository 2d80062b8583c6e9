//! The projected second variation `A_z = λ_z P ∘ δ²F/δη² ∘ P` as a
//! matrix-free operator on noise paths.
//!
//! `P` is the orthogonal projector onto the complement of `η_z` in the
//! weighted `L²` geometry. `A_z` is self-adjoint in that geometry.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instanton::InstantonResult;
use crate::path::{project_orthogonal, Path};
use crate::problem::ProblemSpec;
use crate::propagate::{self, CheckpointPlan};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ApplyMode {
    /// Second-order adjoint sweep.
    #[default]
    Exact,
    /// One-sided difference of gradients, `λ (∇F[η + hδη] − ∇F[η]) / h`.
    /// `None` selects `h = 1e-5 ‖η_z‖ / ‖δη‖`.
    FiniteDifference { h: Option<f64> },
}

pub struct SecondVariationOperator<'a> {
    spec: &'a dyn ProblemSpec,
    instanton: &'a InstantonResult,
    mode: ApplyMode,
    checkpoint: Option<CheckpointPlan>,
    apply_count: AtomicUsize,
    peak_snapshots: AtomicUsize,
    base_gradient: Option<Path>,
}

impl<'a> SecondVariationOperator<'a> {
    pub fn new(spec: &'a dyn ProblemSpec, instanton: &'a InstantonResult) -> Result<Self> {
        if !(instanton.eta.norm() > 0.0) {
            return Err(Error::SingularInstanton);
        }
        if instanton.eta.width() != spec.noise_rank() {
            return Err(Error::Dimension("instanton does not match the problem".into()));
        }
        Ok(Self {
            spec,
            instanton,
            mode: ApplyMode::Exact,
            checkpoint: None,
            apply_count: AtomicUsize::new(0),
            peak_snapshots: AtomicUsize::new(0),
            base_gradient: None,
        })
    }

    pub fn with_mode(mut self, mode: ApplyMode) -> Result<Self> {
        if let ApplyMode::FiniteDifference { h: Some(h) } = mode {
            if !(h > 0.0) {
                return Err(Error::InvalidArgument(format!("difference step must be positive, got {h}")));
            }
        }
        if let ApplyMode::FiniteDifference { .. } = mode {
            let inst = self.instanton;
            self.base_gradient = Some(propagate::gradient(self.spec, &inst.eta, 1.0, &inst.integrator)?);
        }
        self.mode = mode;
        Ok(self)
    }

    /// Replays the forward sweep from at most `plan.budget()` snapshots.
    pub fn with_checkpointing(mut self, plan: CheckpointPlan) -> Result<Self> {
        if plan.n_steps() != self.instanton.grid().n_intervals() {
            return Err(Error::Plan("plan does not match the instanton grid".into()));
        }
        self.checkpoint = Some(plan);
        Ok(self)
    }

    pub fn spec(&self) -> &dyn ProblemSpec {
        self.spec
    }

    pub fn instanton(&self) -> &InstantonResult {
        self.instanton
    }

    pub fn mode(&self) -> ApplyMode {
        self.mode
    }

    /// Number of applications so far.
    pub fn apply_count(&self) -> usize {
        self.apply_count.load(Ordering::Relaxed)
    }

    /// Largest snapshot count seen in checkpointed applications.
    pub fn peak_snapshots(&self) -> usize {
        self.peak_snapshots.load(Ordering::Relaxed)
    }

    /// Dimension of the discretized noise space.
    pub fn dimension(&self) -> usize {
        self.instanton.eta.values().len()
    }

    pub fn project(&self, x: &Path) -> Result<Path> {
        project_orthogonal(x, &self.instanton.eta)
    }

    /// `A_z δη`
    pub fn apply(&self, delta: &Path) -> Result<Path> {
        let inst = self.instanton;
        if delta.width() != inst.eta.width() || !delta.grid().same_as(inst.grid()) {
            return Err(Error::Dimension("direction does not live on the instanton grid".into()));
        }
        self.apply_count.fetch_add(1, Ordering::Relaxed);
        let x = self.project(delta)?;
        let hx = match self.mode {
            ApplyMode::Exact => match &self.checkpoint {
                None => propagate::hessian_apply(self.spec, &inst.eta, &inst.phi, inst.lambda, &x, &inst.integrator)?,
                Some(plan) => {
                    let (out, stats) =
                        propagate::checkpointed_apply(self.spec, &inst.eta, inst.lambda, &x, plan, &inst.integrator)?;
                    self.peak_snapshots.fetch_max(stats.peak_snapshots, Ordering::Relaxed);
                    out
                }
            },
            ApplyMode::FiniteDifference { h } => {
                let xn = x.norm();
                if xn == 0.0 {
                    return Ok(x);
                }
                let h = h.unwrap_or(1e-5 * inst.eta.norm() / xn);
                let mut shifted = inst.eta.clone();
                shifted.axpy(h, &x)?;
                let mut g = propagate::gradient(self.spec, &shifted, 1.0, &inst.integrator)?;
                g.axpy(-1.0, self.base_gradient.as_ref().expect("set with the mode"))?;
                g.scale(inst.lambda / h);
                g
            }
        };
        self.project(&hx)
    }
}
