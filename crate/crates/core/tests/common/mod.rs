#![allow(dead_code)]

use std::sync::Arc;

use bmpc_core::config::{BenchmarkConfig, TrailerConfig};
use bmpc_core::model::{CarTrailer, LinearSystem};
use bmpc_core::objective::{ConstraintSpec, QuadraticObjective, Unconstrained};
use bmpc_core::rng::{SeedableRng, SimRng};
use bmpc_core::{Benchmark, ParamVector};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut SimRng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

pub fn random_spd(rng: &mut SimRng, n: usize) -> DMatrix<f64> {
    let m = random_matrix(rng, n, n, 1.0);
    &m * m.transpose() + DMatrix::identity(n, n) * 0.5
}

/// Unconstrained LQ instance: the dynamics deviations are zero, so the true
/// matrices are the nominal `(a, b)`.
pub struct LqInstance {
    pub bench: Benchmark,
    pub system: Arc<LinearSystem>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub params: ParamVector,
}

pub fn lq_instance(
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    horizon: usize,
    noise_std: f64,
    cost_noise_std: f64,
) -> LqInstance {
    let n = a.nrows();
    let m = b.ncols();
    let system = Arc::new(
        LinearSystem::new(
            a.clone(),
            b.clone(),
            horizon,
            0.1,
            DMatrix::identity(n, n) * noise_std * noise_std,
            1.0,
        )
        .unwrap(),
    );
    let objective =
        QuadraticObjective::new(horizon, q.clone(), r.clone(), cost_noise_std).unwrap();
    let constraints = ConstraintSpec::new(
        DVector::from_element(m, -1e6),
        DVector::from_element(m, 1e6),
        Arc::new(Unconstrained),
        100.0,
        10.0,
    )
    .unwrap();
    let bench = Benchmark::new(system.clone(), Arc::new(objective), constraints).unwrap();
    let params = ParamVector {
        objective: QuadraticObjective::unit_params(),
        dynamics: system.zero_params(),
    };
    LqInstance {
        bench,
        system,
        a,
        b,
        q,
        r,
        params,
    }
}

pub fn random_lq(rng: &mut SimRng, horizon: usize, noise_std: f64) -> LqInstance {
    let n = rng.random_range(1..=4);
    let m = rng.random_range(1..=n);
    let a = DMatrix::identity(n, n) + random_matrix(rng, n, n, 0.3);
    let b = random_matrix(rng, n, m, 1.0);
    let q = random_spd(rng, n);
    let r = random_spd(rng, m);
    lq_instance(a, b, q, r, horizon, noise_std, 0.1)
}

pub fn trailer_config() -> TrailerConfig {
    TrailerConfig::default()
}

pub fn trailer_bench(cfg: &TrailerConfig) -> Benchmark {
    BenchmarkConfig::CarTrailer(cfg.clone()).build().unwrap()
}

pub fn trailer_truth(bench: &Benchmark, cfg: &TrailerConfig) -> ParamVector {
    let sys = CarTrailer::new(
        cfg.horizon,
        cfg.sampling_time,
        bench.system.spec().noise_cov().clone(),
        cfg.geometry,
        cfg.initial,
    )
    .unwrap();
    ParamVector {
        objective: bmpc_core::objective::TrailerObjective::goal_params(3.0, 0.0),
        dynamics: sys.nominal_params(),
    }
}

/// Backward dynamic programming for `x+ = A x + B u + w`, stage cost
/// `x^T Q x + u^T R u` at steps `0..N`. Returns `(K_k, P_k)` with `P_N = 0`.
pub struct Riccati {
    pub gains: Vec<DMatrix<f64>>,
    pub values: Vec<DMatrix<f64>>,
}

impl Riccati {
    pub fn new(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, n: usize) -> Self {
        let dim = a.nrows();
        let mut values = vec![DMatrix::zeros(dim, dim); n + 1];
        let mut gains = vec![DMatrix::zeros(b.ncols(), dim); n];
        for k in (0..n).rev() {
            let p = values[k + 1].clone();
            // Minimize over u: u^T (R + B^T P B) u + 2 u^T B^T P A x.
            let h = r + b.transpose() * &p * b;
            let hinv = h.try_inverse().expect("R + B^T P B singular");
            let gain = &hinv * b.transpose() * &p * a;
            let acl = a - b * &gain;
            values[k] = q + gain.transpose() * r * &gain + acl.transpose() * &p * &acl;
            gains[k] = gain;
        }
        Self { gains, values }
    }

    /// `x^T P_k x + sum_{j=k+1}^{N} tr(P_j Sigma_w)`
    pub fn expected_value(&self, k: usize, x: &DVector<f64>, noise_cov: &DMatrix<f64>) -> f64 {
        let trace: f64 = (k + 1..self.values.len())
            .map(|j| (&self.values[j] * noise_cov).trace())
            .sum();
        x.dot(&(&self.values[k] * x)) + trace
    }
}

pub fn lq_config(noise_std: f64, cost_noise_std: f64) -> bmpc_core::config::ExperimentConfig {
    use bmpc_core::config::{ExperimentConfig, LinearConfig};
    let lin = LinearConfig {
        noise_std,
        cost_noise_std,
        ..LinearConfig::default()
    };
    ExperimentConfig::new(BenchmarkConfig::LinearQuadratic(lin), 1, 4)
}

pub fn zero_script(bench: &Benchmark, x0: DVector<f64>) -> bmpc_core::NoiseScript {
    let n = bench.horizon();
    bmpc_core::NoiseScript {
        initial_state: x0,
        process: vec![DVector::zeros(bench.state_dim()); n],
        cost: vec![0.0; n],
    }
}
