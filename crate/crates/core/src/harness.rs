//! The posterior-sampling learning loop.
//!
//! Every episode samples controller parameters from the current belief,
//! drives the true system with the resulting MPC, and then replays the same
//! initial state and noise with the oracle MPC (true parameters). Their
//! realized-cost difference is the sampled regret. Only the sampled episode
//! is fed back into the belief.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmark::Benchmark;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::inference::{BeliefBundle, Transition};
use crate::model::ParamVector;
use crate::regret::{self, EpisodeSummary, RegretReport, SystemFailure, SystemReport};
use crate::rng::{derive_seed, stream, SeedableRng, SimRng, Stream};
use crate::solver::{policy, SolveStatus, SolverConfig, TraceRow};

/// Pre-drawn randomness of one episode, shared by the sampled and oracle runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseScript {
    pub initial_state: DVector<f64>,
    /// `w(0) .. w(N-1)`
    pub process: Vec<DVector<f64>>,
    /// Cost measurement noise `eps(0) .. eps(N-1)`.
    pub cost: Vec<f64>,
}

impl NoiseScript {
    pub fn draw(bench: &Benchmark, rng: &mut SimRng) -> Self {
        let n = bench.horizon();
        let spec = bench.system.spec();
        let initial_state = bench.system.sample_initial_state(rng);
        let process = (0..n).map(|_| spec.sample_noise(rng)).collect();
        let std = bench.objective.measurement_std();
        let cost = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            initial_state,
            process,
            cost,
        }
    }

    pub fn check(&self, bench: &Benchmark) -> Result<()> {
        let n = bench.horizon();
        if self.process.len() != n || self.cost.len() != n {
            return Err(Error::contract(format!(
                "noise script must cover {n} steps, has {} process and {} cost draws",
                self.process.len(),
                self.cost.len()
            )));
        }
        if self.initial_state.len() != bench.state_dim()
            || self.process.iter().any(|w| w.len() != bench.state_dim())
        {
            return Err(Error::contract("noise script state dimension mismatch"));
        }
        Ok(())
    }
}

/// Outcome of the MPC solve at one closed-loop step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Converged,
    MaxIterations,
    InfeasibleSubproblem,
    /// The solver returned an error; a fallback input was applied.
    Failed,
}

impl From<SolveStatus> for StepStatus {
    fn from(s: SolveStatus) -> Self {
        match s {
            SolveStatus::Converged => StepStatus::Converged,
            SolveStatus::MaxIterations => StepStatus::MaxIterations,
            SolveStatus::InfeasibleSubproblem => StepStatus::InfeasibleSubproblem,
        }
    }
}

/// Per-status step counts, written as `converged=38;max_iterations=2;...`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub converged: usize,
    pub max_iterations: usize,
    pub infeasible_subproblem: usize,
    pub failed: usize,
}

impl StatusCounts {
    pub fn add(&mut self, status: StepStatus) {
        match status {
            StepStatus::Converged => self.converged += 1,
            StepStatus::MaxIterations => self.max_iterations += 1,
            StepStatus::InfeasibleSubproblem => self.infeasible_subproblem += 1,
            StepStatus::Failed => self.failed += 1,
        }
    }

    pub fn from_statuses<'a>(statuses: impl IntoIterator<Item = &'a StepStatus>) -> Self {
        let mut counts = Self::default();
        for s in statuses {
            counts.add(*s);
        }
        counts
    }

    pub fn total(&self) -> usize {
        self.converged + self.max_iterations + self.infeasible_subproblem + self.failed
    }
}

impl std::ops::AddAssign for StatusCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.converged += rhs.converged;
        self.max_iterations += rhs.max_iterations;
        self.infeasible_subproblem += rhs.infeasible_subproblem;
        self.failed += rhs.failed;
    }
}

impl fmt::Display for StatusCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "converged={};max_iterations={};infeasible_subproblem={};failed={}",
            self.converged, self.max_iterations, self.infeasible_subproblem, self.failed
        )
    }
}

impl FromStr for StatusCounts {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut counts = Self::default();
        for part in s.split(';').filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("status count `{part}` lacks `=`")))?;
            let value: usize = value
                .parse()
                .map_err(|_| Error::Parse(format!("status count `{part}` is not an integer")))?;
            match key {
                "converged" => counts.converged = value,
                "max_iterations" => counts.max_iterations = value,
                "infeasible_subproblem" => counts.infeasible_subproblem = value,
                "failed" => counts.failed = value,
                _ => return Err(Error::Parse(format!("unknown solver status `{key}`"))),
            }
        }
        Ok(counts)
    }
}

/// A closed-loop run from some step to the end of the episode.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    /// `x(k0) .. x(N)`
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    /// Realized stage costs including the constraint penalty.
    pub stage_costs: Vec<f64>,
    pub statuses: Vec<StepStatus>,
    /// Solver iteration traces, filled only when requested.
    pub traces: Vec<Vec<TraceRow>>,
}

impl ClosedLoop {
    pub fn cost(&self) -> f64 {
        self.stage_costs.iter().sum()
    }
}

/// Closed-loop simulation of MPC controllers on one true system.
#[derive(Debug, Clone, Copy)]
pub struct Simulator<'a> {
    pub bench: &'a Benchmark,
    pub truth: &'a ParamVector,
    pub solver: &'a SolverConfig,
    pub keep_traces: bool,
}

impl Simulator<'_> {
    /// Runs `controller`'s MPC from `(start, x)` to the end of the episode.
    ///
    /// `process[j]` is added to the transition out of step `start + j`;
    /// `warm` seeds the first solve. A solver error never aborts the run:
    /// the next input of the previous plan (or the clamped zero input) is
    /// applied instead and the step is marked [`StepStatus::Failed`].
    pub fn run(
        &self,
        controller: &ParamVector,
        start: usize,
        x: &DVector<f64>,
        process: &[DVector<f64>],
        warm: Option<Vec<DVector<f64>>>,
    ) -> Result<ClosedLoop> {
        let bench = self.bench;
        let n = bench.horizon();
        if start >= n {
            return Err(Error::contract(format!("start step {start} outside 0..{n}")));
        }
        if process.len() != n - start {
            return Err(Error::contract(format!(
                "{} process-noise draws for {} steps",
                process.len(),
                n - start
            )));
        }
        bench.check_params(self.truth)?;
        bench.check_params(controller)?;
        let mut out = ClosedLoop {
            states: vec![x.clone()],
            inputs: Vec::with_capacity(n - start),
            stage_costs: Vec::with_capacity(n - start),
            statuses: Vec::with_capacity(n - start),
            traces: Vec::new(),
        };
        let mut warm = warm;
        let mut x = x.clone();
        for (j, w) in process.iter().enumerate() {
            let k = start + j;
            let (u, status) = match policy(bench, controller, k, &x, warm.as_deref(), self.solver) {
                Ok((u, sol)) => {
                    warm = sol.shifted(n - k - 1);
                    if self.keep_traces {
                        out.traces.push(sol.trace);
                    }
                    (u, StepStatus::from(sol.status))
                }
                Err(e) => {
                    log::warn!("solver failed at step {k}: {e}");
                    let mut u = warm
                        .as_ref()
                        .map(|p| p[0].clone())
                        .unwrap_or_else(|| DVector::zeros(bench.input_dim()));
                    bench.constraints.clamp_input(&mut u);
                    warm = warm.and_then(|p| (p.len() > 1).then(|| p[1..].to_vec()));
                    if self.keep_traces {
                        out.traces.push(Vec::new());
                    }
                    (u, StepStatus::Failed)
                }
            };
            out.stage_costs
                .push(bench.realized_stage_cost(k, &x, &u, &self.truth.objective)?);
            x = bench.system.step_nominal(&x, &u, &self.truth.dynamics)? + w;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(format!("state became non-finite at step {k}"), j));
            }
            out.inputs.push(u);
            out.statuses.push(status);
            out.states.push(x.clone());
        }
        Ok(out)
    }
}

/// Which controller produced an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Sampled,
    Oracle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub role: Role,
    /// Seed of the episode's noise stream.
    pub seed: u64,
    pub initial_state: DVector<f64>,
    pub transitions: Vec<Transition>,
    pub noise: NoiseScript,
    /// Parameters the controller used.
    pub controller: ParamVector,
    /// Sum of realized stage costs (penalty included, measurement noise excluded).
    pub realized_cost: f64,
    pub statuses: Vec<StepStatus>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub solver_traces: Vec<Vec<TraceRow>>,
    /// Not serialized, so stored records depend on the seeds alone.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl PartialEq for EpisodeRecord {
    fn eq(&self, other: &Self) -> bool {
        self.episode == other.episode
            && self.role == other.role
            && self.seed == other.seed
            && self.initial_state == other.initial_state
            && self.transitions == other.transitions
            && self.noise == other.noise
            && self.controller == other.controller
            && self.realized_cost.to_bits() == other.realized_cost.to_bits()
            && self.statuses == other.statuses
            && self.solver_traces == other.solver_traces
    }
}

/// One system's learning run.
#[derive(Debug, Clone)]
pub struct ExperimentState {
    benchmark: Benchmark,
    /// Seen only by the simulator and the oracle controller.
    truth: ParamVector,
    pub belief: BeliefBundle,
    /// Index of the next episode.
    pub episode: usize,
    pub system_id: usize,
    /// Seed of this system; all episode streams derive from it.
    pub seed: u64,
    pub solver: SolverConfig,
    /// Keep per-solve iteration traces in the episode records.
    pub keep_traces: bool,
    /// Expected-regret evaluation: rollouts per initial state (0 disables).
    pub rollouts: usize,
    pub evaluation_states: Vec<DVector<f64>>,
    pub report: SystemReport,
}

impl ExperimentState {
    pub fn new(
        benchmark: Benchmark,
        truth: ParamVector,
        belief: BeliefBundle,
        system_id: usize,
        seed: u64,
        solver: SolverConfig,
    ) -> Result<Self> {
        benchmark.check_params(&truth)?;
        belief.check_against(&benchmark)?;
        solver.validate()?;
        Ok(Self {
            benchmark,
            report: SystemReport {
                system_id,
                seed,
                truth: truth.clone(),
                episodes: Vec::new(),
            },
            truth,
            belief,
            episode: 0,
            system_id,
            seed,
            solver,
            keep_traces: false,
            rollouts: 0,
            evaluation_states: Vec::new(),
        })
    }

    /// Builds system `system_id` of an experiment: derives its seed, draws
    /// the true parameters from the prior unless the config fixes them.
    pub fn from_config(cfg: &ExperimentConfig, system_id: usize) -> Result<Self> {
        let bench = cfg.benchmark.build()?;
        let prior = cfg.prior_belief(&bench)?;
        let seed = system_seed(cfg.seed, system_id);
        let truth = match &cfg.truth {
            Some(spec) => spec.to_params(),
            None => prior.sample(&mut stream(seed, Stream::TrueParams, 0))?,
        };
        let mut state = Self::new(bench, truth, prior, system_id, seed, cfg.solver)?;
        state.keep_traces = cfg.outputs.traces;
        if cfg.regret.rollouts > 0 {
            let mut rng = stream(seed, Stream::Evaluation, 0);
            state.evaluation_states = (0..cfg.regret.initial_states)
                .map(|_| state.benchmark.system.sample_initial_state(&mut rng))
                .collect();
            state.rollouts = cfg.regret.rollouts;
        }
        Ok(state)
    }

    pub fn benchmark(&self) -> &Benchmark {
        &self.benchmark
    }

    pub fn truth(&self) -> &ParamVector {
        &self.truth
    }

    /// Seed of episode `e`'s noise stream.
    pub fn episode_seed(&self, e: usize) -> u64 {
        derive_seed(self.seed, &[Stream::Episode as u64, e as u64])
    }

    /// Runs the current episode with the given controller parameters on the
    /// true system. Without a script, the episode's own noise stream is drawn.
    pub fn run_episode(
        &self,
        controller: &ParamVector,
        script: Option<&NoiseScript>,
        role: Role,
    ) -> Result<EpisodeRecord> {
        let started = Instant::now();
        let seed = self.episode_seed(self.episode);
        let drawn;
        let script = match script {
            Some(s) => {
                s.check(&self.benchmark)?;
                s
            }
            None => {
                drawn = NoiseScript::draw(&self.benchmark, &mut SimRng::seed_from_u64(seed));
                &drawn
            }
        };
        if !controller.is_finite() {
            return Err(Error::contract("controller parameters must be finite"));
        }
        let bench = &self.benchmark;
        let sim = Simulator {
            bench,
            truth: &self.truth,
            solver: &self.solver,
            keep_traces: self.keep_traces,
        };
        let run = sim.run(controller, 0, &script.initial_state, &script.process, None)?;
        let mut transitions = Vec::with_capacity(bench.horizon());
        for k in 0..bench.horizon() {
            let (x, u) = (&run.states[k], &run.inputs[k]);
            let cost = bench.objective.stage_cost(k, x, u, &self.truth.objective)?;
            transitions.push(Transition {
                episode: self.episode,
                step: k,
                state: x.clone(),
                input: u.clone(),
                next_state: run.states[k + 1].clone(),
                cost_observation: cost + script.cost[k],
            });
        }
        Ok(EpisodeRecord {
            episode: self.episode,
            role,
            seed,
            initial_state: script.initial_state.clone(),
            transitions,
            noise: script.clone(),
            controller: controller.clone(),
            realized_cost: run.cost(),
            statuses: run.statuses,
            solver_traces: run.traces,
            wall_time: started.elapsed(),
        })
    }

    /// One learning episode: sample, act, measure regret, update the belief.
    pub fn advance(&mut self) -> Result<(EpisodeRecord, EpisodeRecord)> {
        let e = self.episode;
        let wrap = |source: Error| Error::Episode {
            system: self.system_id,
            seed: self.seed,
            episode: e,
            source: Box::new(source),
        };
        let sampled_params = self
            .belief
            .sample(&mut stream(self.seed, Stream::PosteriorSample, e as u64))
            .map_err(wrap)?;
        let script = NoiseScript::draw(
            &self.benchmark,
            &mut SimRng::seed_from_u64(self.episode_seed(e)),
        );
        let sampled = self
            .run_episode(&sampled_params, Some(&script), Role::Sampled)
            .map_err(wrap)?;
        let oracle = self
            .run_episode(&self.truth, Some(&script), Role::Oracle)
            .map_err(wrap)?;
        let expected = if self.rollouts > 0 {
            let mut rng = stream(self.seed, Stream::Evaluation, e as u64 + 1);
            Some(
                regret::episodic_regret(
                    &self.benchmark,
                    &self.truth,
                    &sampled_params,
                    &self.evaluation_states,
                    self.rollouts,
                    &mut rng,
                    &self.solver,
                )
                .map_err(wrap)?,
            )
        } else {
            None
        };
        let belief = self
            .belief
            .absorb_episode(&sampled.transitions, &self.benchmark)
            .map_err(wrap)?;

        let delta = sampled.realized_cost - oracle.realized_cost;
        let previous = self
            .report
            .episodes
            .last()
            .map_or(0.0, |s| s.cumulative_regret);
        let mut counts = StatusCounts::from_statuses(&sampled.statuses);
        counts += StatusCounts::from_statuses(&oracle.statuses);
        self.report.episodes.push(EpisodeSummary {
            episode: e,
            seed: sampled.seed,
            sampled_regret: delta,
            cumulative_regret: previous + delta,
            sampled_cost: sampled.realized_cost,
            oracle_cost: oracle.realized_cost,
            status_counts: counts,
            posterior_traces: belief.traces(),
            expected_regret: expected,
        });
        self.belief = belief;
        self.episode += 1;
        Ok((sampled, oracle))
    }
}

/// Seed of system `system_id` under `master`.
pub fn system_seed(master: u64, system_id: usize) -> u64 {
    derive_seed(master, &[system_id as u64])
}

/// Runs one system for `episodes` episodes, calling `sink` with each
/// (sampled, oracle) record pair as it is produced.
pub fn run_learning_with<F>(
    cfg: &ExperimentConfig,
    system_id: usize,
    episodes: usize,
    mut sink: F,
) -> Result<SystemReport>
where
    F: FnMut(EpisodeRecord, EpisodeRecord) -> Result<()>,
{
    let mut state = ExperimentState::from_config(cfg, system_id).map_err(|e| Error::Episode {
        system: system_id,
        seed: system_seed(cfg.seed, system_id),
        episode: 0,
        source: Box::new(e),
    })?;
    for _ in 0..episodes {
        let (sampled, oracle) = state.advance()?;
        sink(sampled, oracle)?;
    }
    Ok(state.report)
}

/// Runs system `system_id` of the experiment and keeps every record.
pub fn run_learning(
    cfg: &ExperimentConfig,
    system_id: usize,
) -> Result<(SystemReport, Vec<EpisodeRecord>)> {
    let mut records = Vec::with_capacity(2 * cfg.episodes);
    let report = run_learning_with(cfg, system_id, cfg.episodes, |s, o| {
        records.push(s);
        records.push(o);
        Ok(())
    })?;
    Ok((report, records))
}

/// Runs all systems in parallel on `cfg.threads` threads (0 = all cores).
///
/// A failing system is recorded in the report and does not stop the others.
pub fn run_population(cfg: &ExperimentConfig) -> Result<RegretReport> {
    run_population_with(cfg, |_, _, _| Ok(()))
}

/// As [`run_population`], passing every record pair to `sink` together with
/// its system index. `sink` may be called from several threads.
pub fn run_population_with<F>(cfg: &ExperimentConfig, sink: F) -> Result<RegretReport>
where
    F: Fn(usize, EpisodeRecord, EpisodeRecord) -> Result<()> + Sync,
{
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::config("threads", e.to_string()))?;
    let outcomes: Vec<Result<SystemReport>> = pool.install(|| {
        (0..cfg.systems)
            .into_par_iter()
            .map(|s| run_learning_with(cfg, s, cfg.episodes, |a, b| sink(s, a, b)))
            .collect()
    });
    let mut systems = Vec::new();
    let mut failures = Vec::new();
    for (s, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(r) => systems.push(r),
            Err(e) => {
                log::error!("system {s} failed: {e}");
                let episode = match &e {
                    Error::Episode { episode, .. } => *episode,
                    _ => 0,
                };
                failures.push(SystemFailure {
                    system_id: s,
                    seed: system_seed(cfg.seed, s),
                    episode,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(RegretReport::new(systems, failures, cfg.episodes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_counts_round_trip() {
        let c = StatusCounts {
            converged: 38,
            max_iterations: 1,
            infeasible_subproblem: 0,
            failed: 1,
        };
        let text = c.to_string();
        assert_eq!(text, "converged=38;max_iterations=1;infeasible_subproblem=0;failed=1");
        assert_eq!(text.parse::<StatusCounts>().unwrap(), c);
        assert_eq!(c.total(), 40);
    }

    #[test]
    fn status_counts_reject_unknown_keys() {
        assert!("converged=1;bogus=2".parse::<StatusCounts>().is_err());
        assert!("converged".parse::<StatusCounts>().is_err());
    }
}
