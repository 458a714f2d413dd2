//! Experiment configuration (TOML).
//!
//! Every constant that shapes an experiment lives here with its default, so
//! a run is reconstructible from the configuration and the master seed.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchmark::Benchmark;
use crate::error::{Error, Result};
use crate::inference::{BeliefBundle, GaussianBelief, MIN_NOISE_VARIANCE};
use crate::model::{
    CarTrailer, DynamicsParams, LinearSystem, ParamVector, TrailerGeometry,
    TrailerInitialRange,
};
use crate::objective::{
    ConstraintSpec, QuadraticObjective, TrailerConstraints, TrailerObjective, Unconstrained,
};
use crate::solver::SolverConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random stream is derived from it.
    #[serde(default)]
    pub seed: u64,
    /// Number of independently drawn systems.
    pub systems: usize,
    /// Learning episodes per system.
    pub episodes: usize,
    /// Worker threads; 0 uses all available cores.
    #[serde(default)]
    pub threads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub benchmark: BenchmarkConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    /// Fixed true parameters; drawn from the prior when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<ParamSpec>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub regret: RegretConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BenchmarkConfig {
    CarTrailer(TrailerConfig),
    LinearQuadratic(LinearConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrailerConfig {
    pub horizon: usize,
    pub sampling_time: f64,
    pub geometry: TrailerGeometry,
    pub initial: TrailerInitialRange,
    pub constraints: TrailerConstraints,
    pub max_steering_rate: f64,
    pub max_acceleration: f64,
    /// Slack penalty weights `c1`, `c2`.
    pub slack_linear: f64,
    pub slack_quadratic: f64,
    /// Process-noise variances per state divided by the sampling time.
    pub process_noise_rates: [f64; 6],
    pub cost_noise_std: f64,
    pub prior: TrailerPrior,
}

impl Default for TrailerConfig {
    fn default() -> Self {
        Self {
            horizon: 40,
            sampling_time: 0.1,
            geometry: TrailerGeometry::default(),
            initial: TrailerInitialRange::default(),
            constraints: TrailerConstraints::default(),
            max_steering_rate: 1.22,
            max_acceleration: 2.0,
            slack_linear: 100.0,
            slack_quadratic: 10.0,
            process_noise_rates: CarTrailer::NOISE_RATES,
            cost_noise_std: 0.5,
            prior: TrailerPrior::default(),
        }
    }
}

/// Physical prior quantities mapped to the parameter blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrailerPrior {
    /// Mean goal position of the car `(x_d, y_d)`.
    pub goal_mean: [f64; 2],
    /// Std of each goal coordinate.
    pub goal_std: f64,
    /// Std of the quadratic terminal-cost coefficients around 1.
    pub quadratic_std: f64,
    /// Std of the steering gain relative to its nominal value `T_s`.
    pub steering_gain_rel_std: f64,
    /// Std of the trailer length around its nominal value.
    pub trailer_length_std: f64,
}

impl Default for TrailerPrior {
    fn default() -> Self {
        Self {
            goal_mean: [3.0, 0.0],
            goal_std: 0.5,
            quadratic_std: 0.01,
            steering_gain_rel_std: 0.15,
            trailer_length_std: 0.45,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearConfig {
    pub horizon: usize,
    pub sampling_time: f64,
    /// Row-major nominal matrices.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    /// Isotropic process-noise std.
    pub noise_std: f64,
    pub cost_noise_std: f64,
    pub initial_radius: f64,
    pub input_bound: f64,
    pub slack_linear: f64,
    pub slack_quadratic: f64,
    /// Std of every dynamics-deviation entry around 0.
    pub dynamics_std: f64,
    pub objective_mean: [f64; 2],
    pub objective_std: [f64; 2],
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            sampling_time: 0.1,
            a: vec![vec![1.0, 0.1], vec![0.0, 1.0]],
            b: vec![vec![0.005], vec![0.1]],
            q: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            r: vec![vec![0.1]],
            noise_std: 0.05,
            cost_noise_std: 0.1,
            initial_radius: 1.0,
            input_bound: 1e3,
            slack_linear: 100.0,
            slack_quadratic: 10.0,
            dynamics_std: 0.05,
            objective_mean: [1.0, 1.0],
            objective_std: [0.3, 0.3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Degenerate prior at the mean: the learner knows the true parameters.
    pub point_mass: bool,
    /// Replaces the benchmark's mapped prior.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explicit: Option<ExplicitPrior>,
}

/// Mean and covariance of one parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitPrior {
    pub objective: BlockSpec,
    pub dynamics: Vec<BlockSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub objective: Vec<f64>,
    pub dynamics: Vec<Vec<f64>>,
}

impl ParamSpec {
    pub fn to_params(&self) -> ParamVector {
        ParamVector {
            objective: DVector::from_column_slice(&self.objective),
            dynamics: DynamicsParams(
                self.dynamics
                    .iter()
                    .map(|d| DVector::from_column_slice(d))
                    .collect(),
            ),
        }
    }

    pub fn from_params(p: &ParamVector) -> Self {
        Self {
            objective: p.objective.iter().copied().collect(),
            dynamics: p.dynamics.0.iter().map(|d| d.iter().copied().collect()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegretConfig {
    /// Rollouts per initial state for the expected-regret estimate; 0 disables it.
    pub rollouts: usize,
    /// Size of the fixed initial-state set shared across episodes.
    pub initial_states: usize,
}

impl Default for RegretConfig {
    fn default() -> Self {
        Self {
            rollouts: 0,
            initial_states: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Write full episode records under `episodes/`.
    pub episodes: bool,
    /// Write per-solve iteration traces under `traces/`.
    pub traces: bool,
}

fn matrix(field: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::config(field, "must be a non-empty rectangular matrix"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::config(field, "entries must be finite"));
    }
    Ok(DMatrix::from_row_iterator(
        nrows,
        ncols,
        rows.iter().flatten().copied(),
    ))
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be positive, got {v}")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be >= 0, got {v}")))
    }
}

fn block_belief(field: &str, spec: &BlockSpec, noise_var: f64) -> Result<GaussianBelief> {
    let p = spec.mean.len();
    let cov = matrix(&format!("{field}.covariance"), &spec.covariance)?;
    if cov.shape() != (p, p) {
        return Err(Error::config(
            format!("{field}.covariance"),
            format!("must be {p} x {p}"),
        ));
    }
    GaussianBelief::new(DVector::from_column_slice(&spec.mean), cov, noise_var)
        .map_err(|e| Error::config(field, e.to_string()))
}

fn block_spec(b: &GaussianBelief) -> BlockSpec {
    let cov = b.cov();
    BlockSpec {
        mean: b.mean().iter().copied().collect(),
        covariance: (0..cov.nrows())
            .map(|i| cov.row(i).iter().copied().collect())
            .collect(),
    }
}

impl ExplicitPrior {
    pub fn from_bundle(bundle: &BeliefBundle) -> Self {
        Self {
            objective: block_spec(&bundle.objective),
            dynamics: bundle.dynamics.iter().map(block_spec).collect(),
        }
    }
}

impl BenchmarkConfig {
    pub fn horizon(&self) -> usize {
        match self {
            BenchmarkConfig::CarTrailer(c) => c.horizon,
            BenchmarkConfig::LinearQuadratic(c) => c.horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BenchmarkConfig::CarTrailer(c) => {
                let f = |s: &str| format!("benchmark.{s}");
                if c.horizon == 0 {
                    return Err(Error::config(f("horizon"), "must be >= 1"));
                }
                positive(&f("sampling_time"), c.sampling_time)?;
                positive(&f("geometry.wheelbase"), c.geometry.wheelbase)?;
                positive(&f("geometry.trailer_length"), c.geometry.trailer_length)?;
                non_negative(&f("geometry.hitch_offset"), c.geometry.hitch_offset)?;
                positive(&f("max_steering_rate"), c.max_steering_rate)?;
                positive(&f("max_acceleration"), c.max_acceleration)?;
                positive(&f("slack_linear"), c.slack_linear)?;
                non_negative(&f("slack_quadratic"), c.slack_quadratic)?;
                positive(&f("constraints.max_articulation"), c.constraints.max_articulation)?;
                positive(&f("constraints.max_steering"), c.constraints.max_steering)?;
                for r in c.process_noise_rates {
                    non_negative(&f("process_noise_rates"), r)?;
                }
                non_negative(&f("cost_noise_std"), c.cost_noise_std)?;
                let p = &c.prior;
                positive(&f("prior.goal_std"), p.goal_std)?;
                positive(&f("prior.quadratic_std"), p.quadratic_std)?;
                positive(&f("prior.steering_gain_rel_std"), p.steering_gain_rel_std)?;
                positive(&f("prior.trailer_length_std"), p.trailer_length_std)?;
                let init = &c.initial;
                for (name, r) in [
                    ("x_c", init.x_c),
                    ("y_c", init.y_c),
                    ("heading", init.heading),
                    ("steering", init.steering),
                    ("speed", init.speed),
                ] {
                    if !(r[0] <= r[1]) {
                        return Err(Error::config(
                            f(&format!("initial.{name}")),
                            "lower end exceeds upper end",
                        ));
                    }
                }
                positive(&f("initial.max_articulation"), init.max_articulation)?;
            }
            BenchmarkConfig::LinearQuadratic(c) => {
                let f = |s: &str| format!("benchmark.{s}");
                if c.horizon == 0 {
                    return Err(Error::config(f("horizon"), "must be >= 1"));
                }
                positive(&f("sampling_time"), c.sampling_time)?;
                let a = matrix(&f("a"), &c.a)?;
                let b = matrix(&f("b"), &c.b)?;
                let q = matrix(&f("q"), &c.q)?;
                let r = matrix(&f("r"), &c.r)?;
                let (n, m) = (a.nrows(), b.ncols());
                if a.ncols() != n || b.nrows() != n {
                    return Err(Error::config(f("b"), "dimensions inconsistent with a"));
                }
                if q.shape() != (n, n) || q.clone().cholesky().is_none() {
                    return Err(Error::config(f("q"), format!("must be {n} x {n} positive definite")));
                }
                if r.shape() != (m, m) || r.clone().cholesky().is_none() {
                    return Err(Error::config(f("r"), format!("must be {m} x {m} positive definite")));
                }
                non_negative(&f("noise_std"), c.noise_std)?;
                non_negative(&f("cost_noise_std"), c.cost_noise_std)?;
                non_negative(&f("initial_radius"), c.initial_radius)?;
                positive(&f("input_bound"), c.input_bound)?;
                positive(&f("slack_linear"), c.slack_linear)?;
                non_negative(&f("slack_quadratic"), c.slack_quadratic)?;
                positive(&f("dynamics_std"), c.dynamics_std)?;
                for s in c.objective_std {
                    positive(&f("objective_std"), s)?;
                }
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Benchmark> {
        self.validate()?;
        match self {
            BenchmarkConfig::CarTrailer(c) => {
                let noise = DMatrix::from_diagonal(&DVector::from_iterator(
                    6,
                    c.process_noise_rates.iter().map(|r| r * c.sampling_time),
                ));
                let system =
                    CarTrailer::new(c.horizon, c.sampling_time, noise, c.geometry, c.initial)?;
                let objective = TrailerObjective::new(c.horizon, c.geometry, c.cost_noise_std)?;
                let bound = DVector::from_vec(vec![c.max_steering_rate, c.max_acceleration]);
                let constraints = ConstraintSpec::new(
                    -bound.clone(),
                    bound,
                    Arc::new(c.constraints),
                    c.slack_linear,
                    c.slack_quadratic,
                )?;
                Benchmark::new(Arc::new(system), Arc::new(objective), constraints)
            }
            BenchmarkConfig::LinearQuadratic(c) => {
                let a = matrix("benchmark.a", &c.a)?;
                let b = matrix("benchmark.b", &c.b)?;
                let n = a.nrows();
                let m = b.ncols();
                let noise = DMatrix::identity(n, n) * c.noise_std.powi(2);
                let system =
                    LinearSystem::new(a, b, c.horizon, c.sampling_time, noise, c.initial_radius)?;
                let objective = QuadraticObjective::new(
                    c.horizon,
                    matrix("benchmark.q", &c.q)?,
                    matrix("benchmark.r", &c.r)?,
                    c.cost_noise_std,
                )?;
                let constraints = ConstraintSpec::new(
                    DVector::from_element(m, -c.input_bound),
                    DVector::from_element(m, c.input_bound),
                    Arc::new(Unconstrained),
                    c.slack_linear,
                    c.slack_quadratic,
                )?;
                Benchmark::new(Arc::new(system), Arc::new(objective), constraints)
            }
        }
    }

    /// Prior implied by the benchmark's physical uncertainty description.
    fn mapped_prior(&self, bench: &Benchmark) -> Result<BeliefBundle> {
        let noise = bench.system.spec().noise_cov();
        let channel_var = |i: usize| noise[(i, i)].max(MIN_NOISE_VARIANCE);
        let cost_var = bench.objective.measurement_std().powi(2).max(MIN_NOISE_VARIANCE);
        match self {
            BenchmarkConfig::CarTrailer(c) => {
                let p = &c.prior;
                let g = &c.geometry;
                let ts = c.sampling_time;
                let objective = GaussianBelief::diagonal(
                    TrailerObjective::goal_params(p.goal_mean[0], p.goal_mean[1]),
                    &[p.quadratic_std, 2.0 * p.goal_std, p.quadratic_std, 2.0 * p.goal_std],
                    cost_var,
                )?;
                let channels = bench.system.spec().channels();
                let steering = GaussianBelief::diagonal(
                    DVector::from_element(1, ts),
                    &[p.steering_gain_rel_std * ts],
                    channel_var(channels[0].state_index),
                )?;
                // First-order propagation of the trailer-length std through 1/b.
                let b = g.trailer_length;
                let scale = ts * p.trailer_length_std / (b * b);
                let trailer = GaussianBelief::diagonal(
                    DVector::from_vec(vec![-ts / b, -ts * g.hitch_offset / (b * g.wheelbase)]),
                    &[scale, scale * g.hitch_offset / g.wheelbase],
                    channel_var(channels[1].state_index),
                )?;
                Ok(BeliefBundle {
                    dynamics: vec![steering, trailer],
                    objective,
                })
            }
            BenchmarkConfig::LinearQuadratic(c) => {
                let objective = GaussianBelief::diagonal(
                    DVector::from_column_slice(&c.objective_mean),
                    &c.objective_std,
                    cost_var,
                )?;
                let dynamics = bench
                    .system
                    .spec()
                    .channels()
                    .iter()
                    .map(|ch| {
                        GaussianBelief::diagonal(
                            DVector::zeros(ch.feature_count),
                            &vec![c.dynamics_std; ch.feature_count],
                            channel_var(ch.state_index),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(BeliefBundle {
                    dynamics,
                    objective,
                })
            }
        }
    }
}

impl ExperimentConfig {
    /// Configuration with defaults for the given benchmark.
    pub fn new(benchmark: BenchmarkConfig, systems: usize, episodes: usize) -> Self {
        Self {
            seed: 0,
            systems,
            episodes,
            threads: 0,
            output_dir: None,
            benchmark,
            prior: PriorConfig::default(),
            truth: None,
            solver: SolverConfig::default(),
            regret: RegretConfig::default(),
            outputs: OutputConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.systems == 0 {
            return Err(Error::config("systems", "must be >= 1"));
        }
        self.benchmark.validate()?;
        self.solver.validate()?;
        if self.regret.rollouts > 0 && self.regret.initial_states == 0 {
            return Err(Error::config(
                "regret.initial_states",
                "must be >= 1 when rollouts > 0",
            ));
        }
        if self.prior.point_mass && self.truth.is_some() {
            return Err(Error::config(
                "truth",
                "a point-mass prior fixes the truth at its mean",
            ));
        }
        let bench = self.benchmark.build()?;
        let prior = self.prior_belief(&bench)?;
        if let Some(t) = &self.truth {
            bench
                .check_params(&t.to_params())
                .map_err(|e| Error::config("truth", e.to_string()))?;
        }
        prior.check_against(&bench).map_err(|e| Error::config("prior", e.to_string()))?;
        Ok(())
    }

    /// The learner's prior. A point-mass prior is returned with its mean
    /// (the caller treats its samples as exact).
    pub fn prior_belief(&self, bench: &Benchmark) -> Result<BeliefBundle> {
        let mapped = self.benchmark.mapped_prior(bench)?;
        let bundle = match &self.prior.explicit {
            None => mapped,
            Some(ex) => {
                if ex.dynamics.len() != mapped.dynamics.len() {
                    return Err(Error::config(
                        "prior.explicit.dynamics",
                        format!("expected {} blocks", mapped.dynamics.len()),
                    ));
                }
                let dynamics = ex
                    .dynamics
                    .iter()
                    .zip(&mapped.dynamics)
                    .enumerate()
                    .map(|(i, (spec, m))| {
                        block_belief(&format!("prior.explicit.dynamics[{i}]"), spec, m.noise_var())
                    })
                    .collect::<Result<Vec<_>>>()?;
                let objective = block_belief(
                    "prior.explicit.objective",
                    &ex.objective,
                    mapped.objective.noise_var(),
                )?;
                BeliefBundle {
                    dynamics,
                    objective,
                }
            }
        };
        bundle
            .check_against(bench)
            .map_err(|e| Error::config("prior", e.to_string()))?;
        if self.prior.point_mass {
            Ok(bundle.point_mass())
        } else {
            Ok(bundle)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
            .map_err(|e| match e {
                Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
                other => other,
            })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trailer_cfg() -> ExperimentConfig {
        ExperimentConfig::new(BenchmarkConfig::CarTrailer(TrailerConfig::default()), 2, 3)
    }

    #[test]
    fn round_trips_through_toml() {
        for cfg in [
            trailer_cfg(),
            ExperimentConfig::new(BenchmarkConfig::LinearQuadratic(LinearConfig::default()), 1, 1),
        ] {
            let text = cfg.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn minimal_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "systems = 2\nepisodes = 5\n[benchmark]\nkind = \"car_trailer\"\nhorizon = 10\n",
        )
        .unwrap();
        let BenchmarkConfig::CarTrailer(t) = &cfg.benchmark else {
            panic!("wrong benchmark");
        };
        assert_eq!(t.horizon, 10);
        assert_eq!(t.cost_noise_std, 0.5);
        assert_eq!(cfg.solver, SolverConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml(
            "systems = 2\nepisodes = 5\ncolour = 1\n[benchmark]\nkind = \"car_trailer\"\n",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
        let err = ExperimentConfig::from_toml(
            "systems = 2\nepisodes = 5\n[benchmark]\nkind = \"car_trailer\"\nhorizn = 3\n",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse(_)), "{err}");
    }

    #[test]
    fn negative_cost_noise_names_the_field() {
        let err = ExperimentConfig::from_toml(
            "systems = 2\nepisodes = 5\n[benchmark]\nkind = \"car_trailer\"\ncost_noise_std = -0.5\n",
        )
        .unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "benchmark.cost_noise_std"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = ExperimentConfig::load(Path::new("/nonexistent/cfg.toml")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn trailer_prior_mapping() {
        let cfg = trailer_cfg();
        let bench = cfg.benchmark.build().unwrap();
        let prior = cfg.prior_belief(&bench).unwrap();
        let nominal = CarTrailer::new(
            40,
            0.1,
            CarTrailer::default_noise_cov(0.1),
            TrailerGeometry::default(),
            TrailerInitialRange::default(),
        )
        .unwrap()
        .nominal_params();
        assert_eq!(prior.dynamics[0].mean(), &nominal.0[0]);
        assert_eq!(prior.dynamics[1].mean(), &nominal.0[1]);
        assert!((prior.dynamics[1].cov()[(0, 0)].sqrt() - 0.01125).abs() < 1e-15);
        assert!((prior.dynamics[0].cov()[(0, 0)].sqrt() - 0.015).abs() < 1e-15);
        assert!((prior.objective.noise_var() - 0.25).abs() < 1e-15);
        // Steering channel noise: T_s * 0.1.
        assert!((prior.dynamics[0].noise_var() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn explicit_prior_round_trips() {
        let cfg = trailer_cfg();
        let bench = cfg.benchmark.build().unwrap();
        let prior = cfg.prior_belief(&bench).unwrap();
        let mut explicit = cfg.clone();
        explicit.prior.explicit = Some(ExplicitPrior::from_bundle(&prior));
        let text = explicit.to_toml().unwrap();
        let reloaded = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(reloaded.prior_belief(&bench).unwrap(), prior);
    }

    #[test]
    fn zero_width_prior_is_rejected() {
        let mut cfg = trailer_cfg();
        if let BenchmarkConfig::CarTrailer(t) = &mut cfg.benchmark {
            t.prior.goal_std = 0.0;
        }
        match cfg.validate().unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "benchmark.prior.goal_std"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn hash_changes_with_content() {
        let a = trailer_cfg();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap(), a.clone().hash().unwrap());
    }
}
