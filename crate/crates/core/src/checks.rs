//! Self-contained consistency checks run by `bmpc verify`.
//!
//! Each check draws its own problems from a seed, compares the library
//! against an independent computation and reports the worst deviation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::benchmark::Benchmark;
use crate::config::{BenchmarkConfig, ExperimentConfig, LinearConfig, TrailerConfig};
use crate::error::Result;
use crate::harness::run_learning;
use crate::inference::GaussianBelief;
use crate::lqr;
use crate::model::{LinearSystem, ParamVector};
use crate::objective::{ConstraintSpec, QuadraticObjective, Unconstrained};
use crate::regret::{episodic_regret, estimate_value, rotated_regret, Estimate};
use crate::rng::{derive_seed, SeedableRng, SimRng};
use crate::solver::{policy, SolverConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed deviation, in the unit of `tolerance`.
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, value: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed: value <= tolerance,
            value,
            tolerance,
            detail,
        }
    }
}

fn rng_for(seed: u64, check: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, &[check]))
}

fn relative(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// Batch posterior by least squares on the whitened stacked system
/// `[L^-1; phi / s] theta ~ [L^-1 mu; y / s]` with `Sigma = L L^T`.
fn batch_posterior(prior: &GaussianBelief, phi: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let p = prior.dim();
    let m = phi.nrows();
    let l = prior.cov().clone().cholesky().expect("prior covariance").l();
    let linv = l.solve_lower_triangular(&DMatrix::identity(p, p)).expect("triangular");
    let s = prior.noise_var().sqrt();
    let mut a = DMatrix::zeros(p + m, p);
    a.view_mut((0, 0), (p, p)).copy_from(&linv);
    a.view_mut((p, 0), (m, p)).copy_from(&(phi / s));
    let mut b = DVector::zeros(p + m);
    b.rows_mut(0, p).copy_from(&(&linv * prior.mean()));
    b.rows_mut(p, m).copy_from(&(y / s));
    let qr = a.qr();
    let r = qr.r();
    let mean = r
        .solve_upper_triangular(&(qr.q().transpose() * b))
        .expect("full column rank");
    let rinv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .expect("full column rank");
    (mean, &rinv * rinv.transpose())
}

/// Sequential (chunked) conjugate updates agree with one batch posterior.
pub fn conjugacy(seed: u64, problems: usize) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 1);
    let mut worst = 0.0f64;
    for _ in 0..problems {
        let p = rng.random_range(1..=8);
        let m = rng.random_range(1..=1000);
        let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        let cov = &a * a.transpose() + DMatrix::identity(p, p);
        let mean = DVector::from_fn(p, |_, _| rng.random_range(-2.0..2.0));
        let noise_var = rng.random_range(0.1..2.0);
        let prior = GaussianBelief::new(mean, cov, noise_var)?;
        let phi = DMatrix::from_fn(m, p, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(m, |_, _| rng.random_range(-3.0..3.0));

        let mut seq = prior.clone();
        let mut start = 0;
        while start < m {
            let len = rng.random_range(1..=(m - start).min(64));
            seq = seq
                .update(&phi.rows(start, len).into_owned(), &y.rows(start, len).into_owned())?
                .belief;
            start += len;
        }
        let (mean, cov) = batch_posterior(&prior, &phi, &y);
        let mean_err = (seq.mean() - &mean).norm() / mean.norm().max(1e-300);
        worst = worst.max(mean_err).max(relative(seq.cov(), &cov));
    }
    Ok(CheckResult::new(
        "conjugacy",
        worst,
        1e-10,
        format!("{problems} problems, p <= 8, M <= 1000: sequential vs batch relative error"),
    ))
}

/// An unconstrained random LQ benchmark and its true parameters.
pub(crate) fn random_lq(rng: &mut SimRng, horizon: usize, noise_std: f64) -> Result<(Benchmark, ParamVector, [DMatrix<f64>; 4])> {
    let n = rng.random_range(1..=4);
    let m = rng.random_range(1..=n);
    let a = DMatrix::identity(n, n) + DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.3..0.3));
    let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
    let spd = |rng: &mut SimRng, d: usize| {
        let g = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &g * g.transpose() + DMatrix::identity(d, d) * 0.5
    };
    let q = spd(rng, n);
    let r = spd(rng, m);
    let system = Arc::new(LinearSystem::new(
        a.clone(),
        b.clone(),
        horizon,
        0.1,
        DMatrix::identity(n, n) * noise_std * noise_std,
        1.0,
    )?);
    let objective = QuadraticObjective::new(horizon, q.clone(), r.clone(), 0.0)?;
    let constraints = ConstraintSpec::new(
        DVector::from_element(m, -1e6),
        DVector::from_element(m, 1e6),
        Arc::new(Unconstrained),
        100.0,
        10.0,
    )?;
    let params = ParamVector {
        objective: QuadraticObjective::unit_params(),
        dynamics: system.zero_params(),
    };
    let bench = Benchmark::new(system, Arc::new(objective), constraints)?;
    Ok((bench, params, [a, b, q, r]))
}

/// MPC first input against LQR feedback, and the value estimate against
/// the dynamic-programming value.
pub fn riccati(seed: u64, instances: usize, rollouts: usize) -> Result<Vec<CheckResult>> {
    let mut rng = rng_for(seed, 2);
    let solver = SolverConfig {
        kkt_tolerance: 1e-10,
        ..SolverConfig::default()
    };
    let horizon = 8;
    let mut worst_input = 0.0f64;
    let mut worst_z = 0.0f64;
    for i in 0..instances {
        let (bench, params, [a, b, q, r]) = random_lq(&mut rng, horizon, 0.1)?;
        let ric = lqr::finite_horizon(&a, &b, &q, &r, horizon)?;
        let k = rng.random_range(0..horizon);
        let x = DVector::from_fn(a.nrows(), |_, _| rng.random_range(-1.0..1.0));
        let (u, _) = policy(&bench, &params, k, &x, None, &solver)?;
        let expected = -&ric.gains[k] * &x;
        worst_input = worst_input.max((&u - &expected).norm() / expected.norm().max(1e-12));
        if i < 10 {
            let est = estimate_value(&bench, &params, &params, k, &x, rollouts, &mut rng, &solver)?;
            let exact = ric.expected_value(k, &x, bench.system.spec().noise_cov());
            let z = (est.mean - exact).abs() / (est.std_error + 1e-12 * exact.abs());
            worst_z = worst_z.max(z);
        }
    }
    Ok(vec![
        CheckResult::new(
            "riccati_feedback",
            worst_input,
            1e-6,
            format!("{instances} LQ instances: relative error of the first input"),
        ),
        CheckResult::new(
            "riccati_value",
            worst_z,
            3.0,
            format!("{} LQ instances, {rollouts} rollouts: |estimate - DP| in standard errors", instances.min(10)),
        ),
    ])
}

/// Analytic dynamics Jacobians against central differences on the
/// car-trailer benchmark.
pub fn jacobians(seed: u64, points: usize) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 3);
    let cfg = BenchmarkConfig::CarTrailer(TrailerConfig::default());
    let bench = cfg.build()?;
    let prior = ExperimentConfig::new(cfg, 1, 1).prior_belief(&bench)?;
    let sys = &bench.system;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..points {
        let theta = prior.sample(&mut rng)?.dynamics;
        let x = sys.sample_initial_state(&mut rng);
        let u = DVector::from_fn(bench.input_dim(), |i, _| {
            let hi = bench.constraints.input_upper[i];
            rng.random_range(-hi..hi)
        });
        let (ja, jb) = sys.jacobians(&x, &u, &theta)?;
        let n = x.len();
        let m = u.len();
        let mut analytic = DMatrix::zeros(n, n + m);
        analytic.view_mut((0, 0), (n, n)).copy_from(&ja);
        analytic.view_mut((0, n), (n, m)).copy_from(&jb);
        let mut numeric = DMatrix::zeros(n, n + m);
        for j in 0..n + m {
            let (mut xp, mut xm, mut up, mut um) = (x.clone(), x.clone(), u.clone(), u.clone());
            if j < n {
                xp[j] += h;
                xm[j] -= h;
            } else {
                up[j - n] += h;
                um[j - n] -= h;
            }
            let col = (sys.step_nominal(&xp, &up, &theta)? - sys.step_nominal(&xm, &um, &theta)?) / (2.0 * h);
            numeric.set_column(j, &col);
        }
        worst = worst.max(relative(&analytic, &numeric));
    }
    Ok(CheckResult::new(
        "jacobians",
        worst,
        1e-4,
        format!("{points} car-trailer points: relative error against central differences"),
    ))
}

/// Average episodic and rotated regret agree when the sampled parameters
/// come from the posterior of data generated by the true ones.
///
/// Per pair, both regrets share the rollout of the sampled controller on the
/// true system, so their difference is `V(theta_e, theta_e) - V(theta, theta)`,
/// which has mean zero when `theta` and `theta_e` are exchangeable.
pub fn posterior_matching(seed: u64, pairs: usize) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 4);
    let lin = LinearConfig {
        horizon: 6,
        noise_std: 0.05,
        cost_noise_std: 0.1,
        ..LinearConfig::default()
    };
    let cfg = ExperimentConfig::new(BenchmarkConfig::LinearQuadratic(lin), 1, 1);
    let bench = cfg.benchmark.build()?;
    let prior = cfg.prior_belief(&bench)?;
    let solver = SolverConfig::default();
    let mut diffs = Vec::with_capacity(pairs);
    let mut episodic = Vec::with_capacity(pairs);
    let mut rotated = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let truth = prior.sample(&mut rng)?;
        // One episode of data from a prior-sampled controller.
        let explorer = prior.sample(&mut rng)?;
        let x0 = bench.system.sample_initial_state(&mut rng);
        let mut x = x0;
        let mut transitions = Vec::with_capacity(bench.horizon());
        for k in 0..bench.horizon() {
            let (u, _) = policy(&bench, &explorer, k, &x, None, &solver)?;
            let next = bench.system.step_noisy(&x, &u, &truth.dynamics, &mut rng)?;
            let cost = bench.objective.stage_cost(k, &x, &u, &truth.objective)?
                + bench.objective.measurement_std() * rng.sample::<f64, _>(rand_distr::StandardNormal);
            transitions.push(crate::inference::Transition {
                episode: 0,
                step: k,
                state: x.clone(),
                input: u.clone(),
                next_state: next.clone(),
                cost_observation: cost,
            });
            x = next;
        }
        let posterior = prior.absorb_episode(&transitions, &bench)?;
        let sampled = posterior.sample(&mut rng)?;
        let x0s = [bench.system.sample_initial_state(&mut rng)];
        let mut paired = rng.clone();
        let e = episodic_regret(&bench, &truth, &sampled, &x0s, 1, &mut paired, &solver)?;
        let r = rotated_regret(&bench, &truth, &sampled, &x0s, 1, &mut rng, &solver)?;
        episodic.push(e.mean);
        rotated.push(r.mean);
        diffs.push(e.mean - r.mean);
    }
    let d = Estimate::from_samples(&diffs);
    let z = d.mean.abs() / d.std_error.max(1e-300);
    let e = Estimate::from_samples(&episodic);
    let r = Estimate::from_samples(&rotated);
    Ok(CheckResult::new(
        "posterior_matching",
        z,
        4.0,
        format!(
            "{pairs} pairs: episodic {:.4e} +- {:.1e}, rotated {:.4e} +- {:.1e}; difference in standard errors",
            e.mean, e.std_error, r.mean, r.std_error
        ),
    ))
}

/// A point-mass prior makes the sampled and oracle controllers identical.
pub fn zero_regret(seed: u64) -> Result<CheckResult> {
    let t = TrailerConfig {
        horizon: 10,
        ..TrailerConfig::default()
    };
    let mut cfg = ExperimentConfig::new(BenchmarkConfig::CarTrailer(t), 1, 3);
    cfg.seed = seed;
    cfg.prior.point_mass = true;
    let (report, _) = run_learning(&cfg, 0)?;
    let worst = report
        .episodes
        .iter()
        .map(|e| e.sampled_regret.abs())
        .fold(0.0, f64::max);
    Ok(CheckResult::new(
        "zero_regret",
        worst,
        0.0,
        format!("{} episodes with a point-mass prior: largest |regret|", report.episodes.len()),
    ))
}

/// All checks at their default sizes.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = vec![conjugacy(seed, 100)?];
    out.extend(riccati(seed, 50, 200)?);
    out.push(jacobians(seed, 100)?);
    out.push(posterior_matching(seed, 500)?);
    out.push(zero_regret(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_checks_pass() {
        assert!(conjugacy(1, 10).unwrap().passed);
        for c in riccati(1, 5, 50).unwrap() {
            assert!(c.passed, "{c:?}");
        }
        assert!(jacobians(1, 10).unwrap().passed);
    }
}
