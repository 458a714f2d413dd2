//! A controlled system together with its objective and constraints.

use std::sync::Arc;

use nalgebra::DVector;

use crate::model::{Dynamics, ParamVector};
use crate::objective::{ConstraintSpec, Objective};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub system: Arc<dyn Dynamics>,
    pub objective: Arc<dyn Objective>,
    pub constraints: ConstraintSpec,
}

impl Benchmark {
    pub fn new(
        system: Arc<dyn Dynamics>,
        objective: Arc<dyn Objective>,
        constraints: ConstraintSpec,
    ) -> Result<Self> {
        let spec = system.spec();
        if objective.horizon() != spec.horizon() {
            return Err(Error::contract(format!(
                "objective horizon {} differs from system horizon {}",
                objective.horizon(),
                spec.horizon()
            )));
        }
        if constraints.input_lower.len() != spec.input_dim() {
            return Err(Error::contract("input box dimension mismatch"));
        }
        Ok(Self {
            system,
            objective,
            constraints,
        })
    }

    pub fn horizon(&self) -> usize {
        self.system.spec().horizon()
    }

    pub fn state_dim(&self) -> usize {
        self.system.spec().state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.system.spec().input_dim()
    }

    /// Checks that `theta` has the block layout this benchmark expects.
    pub fn check_params(&self, theta: &ParamVector) -> Result<()> {
        if theta.objective.len() != self.objective.feature_count() {
            return Err(Error::contract("objective parameter length mismatch"));
        }
        self.system.spec().check_params(&theta.dynamics)?;
        if !theta.is_finite() {
            return Err(Error::contract("parameters must be finite"));
        }
        Ok(())
    }

    /// Closed-loop cost of one step: stage cost plus the penalty for the
    /// smallest slack that makes the visited state admissible.
    pub fn realized_stage_cost(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        objective_params: &DVector<f64>,
    ) -> Result<f64> {
        Ok(self.objective.stage_cost(k, x, u, objective_params)?
            + self.constraints.state_penalty(x))
    }
}
