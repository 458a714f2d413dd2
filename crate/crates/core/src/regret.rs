//! Regret measurement, value-function diagnostics and the regret bound.

use std::io::{Read, Write};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::benchmark::Benchmark;
use crate::error::{Error, Result};
use crate::harness::{Simulator, StatusCounts};
use crate::model::ParamVector;
use crate::rng::SimRng;
use crate::solver::{policy, SolverConfig};

/// A Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        if n > 0 && values.iter().all(|v| v.to_bits() == values[0].to_bits()) {
            return Self {
                mean: values[0],
                std_error: 0.0,
                samples: n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std_error,
            samples: n,
        }
    }
}

fn draw_process(bench: &Benchmark, steps: usize, rng: &mut SimRng) -> Vec<DVector<f64>> {
    let spec = bench.system.spec();
    (0..steps).map(|_| spec.sample_noise(rng)).collect()
}

fn rollout_cost(
    bench: &Benchmark,
    system: &ParamVector,
    controller: &ParamVector,
    k: usize,
    x: &DVector<f64>,
    process: &[DVector<f64>],
    solver: &SolverConfig,
) -> Result<f64> {
    let sim = Simulator {
        bench,
        truth: system,
        solver,
        keep_traces: false,
    };
    Ok(sim.run(controller, k, x, process, None)?.cost())
}

/// Expected cost-to-go from `(k, x)` of `controller`'s MPC on the system
/// with parameters `system`, averaged over `rollouts` noise draws.
#[allow(clippy::too_many_arguments)]
pub fn estimate_value(
    bench: &Benchmark,
    system: &ParamVector,
    controller: &ParamVector,
    k: usize,
    x: &DVector<f64>,
    rollouts: usize,
    rng: &mut SimRng,
    solver: &SolverConfig,
) -> Result<Estimate> {
    if rollouts == 0 {
        return Err(Error::contract("at least one rollout is required"));
    }
    if k >= bench.horizon() {
        return Err(Error::contract(format!("step {k} outside 0..{}", bench.horizon())));
    }
    let mut costs = Vec::with_capacity(rollouts);
    for _ in 0..rollouts {
        let process = draw_process(bench, bench.horizon() - k, rng);
        costs.push(rollout_cost(bench, system, controller, k, x, &process, solver)?);
    }
    Ok(Estimate::from_samples(&costs))
}

/// Paired-noise estimate of `E_x[V(a) - V(b)]` where each side is a
/// `(system, controller)` pair started at step 0.
fn paired_difference(
    bench: &Benchmark,
    a: (&ParamVector, &ParamVector),
    b: (&ParamVector, &ParamVector),
    initial_states: &[DVector<f64>],
    rollouts: usize,
    rng: &mut SimRng,
    solver: &SolverConfig,
) -> Result<Estimate> {
    if initial_states.is_empty() || rollouts == 0 {
        return Err(Error::contract(
            "need at least one initial state and one rollout",
        ));
    }
    let mut diffs = Vec::with_capacity(initial_states.len() * rollouts);
    for x0 in initial_states {
        for _ in 0..rollouts {
            let process = draw_process(bench, bench.horizon(), rng);
            let va = rollout_cost(bench, a.0, a.1, 0, x0, &process, solver)?;
            let vb = if a == b {
                va
            } else {
                rollout_cost(bench, b.0, b.1, 0, x0, &process, solver)?
            };
            diffs.push(va - vb);
        }
    }
    Ok(Estimate::from_samples(&diffs))
}

/// Expected episodic regret `E_x[V^{theta,theta_e}_0(x) - V^{theta,theta}_0(x)]`
/// under common random numbers.
pub fn episodic_regret(
    bench: &Benchmark,
    truth: &ParamVector,
    sampled: &ParamVector,
    initial_states: &[DVector<f64>],
    rollouts: usize,
    rng: &mut SimRng,
    solver: &SolverConfig,
) -> Result<Estimate> {
    paired_difference(
        bench,
        (truth, sampled),
        (truth, truth),
        initial_states,
        rollouts,
        rng,
        solver,
    )
}

/// Rotated regret `E_x[V^{theta,theta_e}_0(x) - V^{theta_e,theta_e}_0(x)]`:
/// cost of the sampled controller on the true system minus its cost on the
/// sampled system.
pub fn rotated_regret(
    bench: &Benchmark,
    truth: &ParamVector,
    sampled: &ParamVector,
    initial_states: &[DVector<f64>],
    rollouts: usize,
    rng: &mut SimRng,
    solver: &SolverConfig,
) -> Result<Estimate> {
    paired_difference(
        bench,
        (truth, sampled),
        (sampled, sampled),
        initial_states,
        rollouts,
        rng,
        solver,
    )
}

/// Difference between a value estimate and its one-step Bellman backup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BellmanResidual {
    /// `V_k(x) - (l(k, x, u) + E_w V_{k+1}(f(x, u) + w))`
    pub difference: f64,
    pub std_error: f64,
}

impl BellmanResidual {
    pub fn residual(&self) -> f64 {
        self.difference.abs()
    }
}

/// Bellman residual of the MPC policy with parameters `params` on the
/// system with the same parameters.
///
/// Both sides use independent noise. The backup continues from `k + 1` with
/// the plan computed at `k` as warm start, exactly as the closed loop does,
/// so the policy's warm-start memory is part of the state.
pub fn bellman_residual(
    bench: &Benchmark,
    params: &ParamVector,
    k: usize,
    x: &DVector<f64>,
    rollouts: usize,
    rng: &mut SimRng,
    solver: &SolverConfig,
) -> Result<BellmanResidual> {
    let n = bench.horizon();
    if k >= n {
        return Err(Error::contract(format!("step {k} outside 0..{n}")));
    }
    let value = estimate_value(bench, params, params, k, x, rollouts, rng, solver)?;
    let (u, sol) = policy(bench, params, k, x, None, solver)?;
    let stage = bench.realized_stage_cost(k, x, &u, &params.objective)?;
    let next = bench.system.step_nominal(x, &u, &params.dynamics)?;
    let sim = Simulator {
        bench,
        truth: params,
        solver,
        keep_traces: false,
    };
    let spec = bench.system.spec();
    let mut backups = Vec::with_capacity(rollouts);
    for _ in 0..rollouts {
        let w = spec.sample_noise(rng);
        let tail = if k + 1 < n {
            let process = draw_process(bench, n - k - 1, rng);
            sim.run(params, k + 1, &(&next + w), &process, sol.shifted(n - k - 1))?
                .cost()
        } else {
            0.0
        };
        backups.push(stage + tail);
    }
    let backup = Estimate::from_samples(&backups);
    Ok(BellmanResidual {
        difference: value.mean - backup.mean,
        std_error: value.std_error.hypot(backup.std_error),
    })
}

/// Constants of the linear-regression regret bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundParams {
    pub sigma_eps: f64,
    /// Largest per-channel process-noise standard deviation.
    pub sigma_w: f64,
    /// Regularity constant of the cost-to-go; user supplied.
    pub l_v: f64,
    pub state_dim: usize,
    pub dynamics_features: usize,
    pub objective_features: usize,
    pub horizon: usize,
    /// Leading constant hidden by the bound's order notation.
    pub c: f64,
}

impl BoundParams {
    /// Dimensions and noise levels of `bench` with the given constants.
    pub fn for_benchmark(bench: &Benchmark, l_v: f64, c: f64) -> Self {
        let spec = bench.system.spec();
        let sigma_w = spec
            .noise_cov()
            .diagonal()
            .iter()
            .fold(0.0f64, |acc, &v| acc.max(v.max(0.0).sqrt()));
        Self {
            sigma_eps: bench.objective.measurement_std(),
            sigma_w,
            l_v,
            state_dim: spec.state_dim(),
            dynamics_features: spec.feature_count(),
            objective_features: bench.objective.feature_count(),
            horizon: spec.horizon(),
            c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("sigma_eps", self.sigma_eps),
            ("sigma_w", self.sigma_w),
            ("l_v", self.l_v),
            ("c", self.c),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        for (field, v) in [
            ("state_dim", self.state_dim),
            ("dynamics_features", self.dynamics_features),
            ("objective_features", self.objective_features),
            ("horizon", self.horizon),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }

    /// `c * (sigma_eps sqrt(n_l E N) + L_V sigma_w n sqrt(n n_f E N))`
    pub fn value(&self, episodes: usize) -> f64 {
        let e = episodes as f64;
        let n = self.state_dim as f64;
        let horizon = self.horizon as f64;
        self.c
            * (self.sigma_eps * (self.objective_features as f64 * e * horizon).sqrt()
                + self.l_v
                    * self.sigma_w
                    * n
                    * (n * self.dynamics_features as f64 * e * horizon).sqrt())
    }
}

/// Bound values for `0..=max_episodes` episodes.
pub fn bound_curve(params: &BoundParams, max_episodes: usize) -> Result<Vec<f64>> {
    params.validate()?;
    Ok((0..=max_episodes).map(|e| params.value(e)).collect())
}

/// Least-squares exponent `alpha` of `CR(E) ~ c E^alpha`, where
/// `cumulative[i]` is the cumulative regret after `i + 1` episodes. Points
/// with nonpositive regret are skipped; `None` if fewer than two remain.
pub fn fit_exponent(cumulative: &[f64]) -> Option<f64> {
    let points: Vec<(f64, f64)> = cumulative
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0.0 && c.is_finite())
        .map(|(i, &c)| (((i + 1) as f64).ln(), c.ln()))
        .collect();
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Linear-interpolation quantile (the default of most statistics packages).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    /// Seed of the episode's noise stream.
    pub seed: u64,
    /// Realized cost of the sampled controller minus that of the oracle.
    pub sampled_regret: f64,
    pub cumulative_regret: f64,
    pub sampled_cost: f64,
    pub oracle_cost: f64,
    /// Over both controllers' steps.
    pub status_counts: StatusCounts,
    /// Posterior covariance trace per block after the update.
    pub posterior_traces: Vec<f64>,
    pub expected_regret: Option<Estimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub system_id: usize,
    pub seed: u64,
    pub truth: ParamVector,
    pub episodes: Vec<EpisodeSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemFailure {
    pub system_id: usize,
    pub seed: u64,
    pub episode: usize,
    pub message: String,
}

/// Cross-system statistics of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: usize,
    pub systems: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub mean: f64,
    /// Running sum of `mean` up to this episode.
    pub mean_cumulative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub systems: Vec<SystemReport>,
    pub failures: Vec<SystemFailure>,
    pub stats: Vec<EpisodeStats>,
    pub bound: Option<Vec<f64>>,
}

/// Column order of `regret.csv`.
pub const REGRET_CSV_HEADER: [&str; 6] = [
    "system_id",
    "episode",
    "sampled_regret",
    "cumulative_regret",
    "solver_status_counts",
    "seed",
];

/// Column order of `summary.csv`.
pub const SUMMARY_CSV_HEADER: [&str; 7] = [
    "episode",
    "systems",
    "median",
    "q25",
    "q75",
    "mean",
    "mean_cumulative",
];

/// One row of `regret.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretRow {
    pub system_id: usize,
    pub episode: usize,
    pub sampled_regret: f64,
    pub cumulative_regret: f64,
    pub solver_status_counts: String,
    pub seed: u64,
}

impl RegretReport {
    /// Aggregates successful systems over episodes `0..episodes`.
    pub fn new(mut systems: Vec<SystemReport>, failures: Vec<SystemFailure>, episodes: usize) -> Self {
        systems.sort_by_key(|s| s.system_id);
        let mut stats = Vec::with_capacity(episodes);
        let mut cumulative = 0.0;
        for e in 0..episodes {
            let values: Vec<f64> = systems
                .iter()
                .filter_map(|s| s.episodes.get(e).map(|x| x.sampled_regret))
                .collect();
            if values.is_empty() {
                break;
            }
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            cumulative += mean;
            stats.push(EpisodeStats {
                episode: e,
                systems: values.len(),
                median: median(&values),
                q25: quantile(&values, 0.25),
                q75: quantile(&values, 0.75),
                mean,
                mean_cumulative: cumulative,
            });
        }
        Self {
            systems,
            failures,
            stats,
            bound: None,
        }
    }

    /// Per-episode sampled regret across systems.
    pub fn episode_values(&self, episode: usize) -> Vec<f64> {
        self.systems
            .iter()
            .filter_map(|s| s.episodes.get(episode).map(|x| x.sampled_regret))
            .collect()
    }

    pub fn medians(&self) -> Vec<f64> {
        self.stats.iter().map(|s| s.median).collect()
    }

    /// Mean cumulative regret `CR(E)` for `E = 1, 2, ...`.
    pub fn mean_cumulative(&self) -> Vec<f64> {
        self.stats.iter().map(|s| s.mean_cumulative).collect()
    }

    /// Growth exponent of the mean cumulative regret.
    pub fn exponent(&self) -> Option<f64> {
        fit_exponent(&self.mean_cumulative())
    }

    pub fn rows(&self) -> Vec<RegretRow> {
        self.systems
            .iter()
            .flat_map(|s| {
                s.episodes.iter().map(move |e| RegretRow {
                    system_id: s.system_id,
                    episode: e.episode,
                    sampled_regret: e.sampled_regret,
                    cumulative_regret: e.cumulative_regret,
                    solver_status_counts: e.status_counts.to_string(),
                    seed: e.seed,
                })
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_regret_csv(writer, &self.rows())
    }

    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(SUMMARY_CSV_HEADER)?;
        for s in &self.stats {
            w.write_record([
                s.episode.to_string(),
                s.systems.to_string(),
                s.median.to_string(),
                s.q25.to_string(),
                s.q75.to_string(),
                s.mean.to_string(),
                s.mean_cumulative.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Floats are written in shortest round-trip form, so reading a file back
/// recovers every value bitwise.
pub fn write_regret_csv<W: Write>(writer: W, rows: &[RegretRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(REGRET_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.system_id.to_string(),
            r.episode.to_string(),
            r.sampled_regret.to_string(),
            r.cumulative_regret.to_string(),
            r.solver_status_counts.clone(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_regret_csv<R: Read>(reader: R) -> Result<Vec<RegretRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != REGRET_CSV_HEADER {
        return Err(Error::Parse(format!(
            "regret CSV header {header:?} differs from {REGRET_CSV_HEADER:?}"
        )));
    }
    let mut rows = Vec::new();
    for record in r.deserialize() {
        let row: RegretRow = record?;
        row.solver_status_counts.parse::<StatusCounts>()?;
        rows.push(row);
    }
    Ok(rows)
}
