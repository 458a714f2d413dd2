//! Posterior-sampling model predictive control.
//!
//! Each learning episode draws controller parameters from a conjugate
//! Gaussian posterior, runs a soft-constrained shrinking-horizon MPC in
//! closed loop, and updates the posterior from the observed transitions and
//! noisy cost measurements. Regret is measured against the MPC that knows
//! the true parameters, under common random numbers.

// `!(x <= y)` rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod checks;
pub mod config;
pub mod error;
pub mod harness;
pub mod inference;
pub mod lqr;
pub mod model;
pub mod objective;
pub mod regret;
pub mod rng;
pub mod solver;

pub use benchmark::Benchmark;
pub use error::{Error, Result};
pub use harness::{EpisodeRecord, ExperimentState, NoiseScript, StatusCounts, StepStatus};
pub use model::{Dynamics, DynamicsParams, ParamVector};
pub use regret::{Estimate, RegretReport};
pub use solver::{policy, solve, HessianModel, MpcProblem, MpcSolution, SolveStatus, SolverConfig};
