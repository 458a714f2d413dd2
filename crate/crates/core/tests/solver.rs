mod common;


use bmpc_core::model::trailer_index::*;
use bmpc_core::{solve, MpcProblem, SolveStatus, SolverConfig};
use common::*;
use nalgebra::DVector;
use rand::Rng;

fn tight() -> SolverConfig {
    SolverConfig {
        kkt_tolerance: 1e-10,
        ..SolverConfig::default()
    }
}

#[test]
fn first_input_matches_riccati_feedback() {
    let mut rng = rng(11);
    for _ in 0..20 {
        let inst = random_lq(&mut rng, 8, 0.0);
        let ric = Riccati::new(&inst.a, &inst.b, &inst.q, &inst.r, 8);
        let k = rng.random_range(0..8);
        let x = DVector::from_fn(inst.a.nrows(), |_, _| rng.random_range(-1.0..1.0));
        let sol = solve(
            &MpcProblem {
                benchmark: &inst.bench,
                params: &inst.params,
                step: k,
                state: &x,
                warm_start: None,
            },
            &tight(),
        )
        .unwrap();
        let expected = -&ric.gains[k] * &x;
        let err = (&sol.inputs[0] - &expected).norm() / expected.norm().max(1e-12);
        assert!(err < 1e-6, "relative error {err:.3e}, status {:?}", sol.status);
        assert_eq!(sol.status, SolveStatus::Converged);
    }
}

#[test]
fn zero_state_is_stationary() {
    let mut rng = rng(3);
    let inst = random_lq(&mut rng, 6, 0.0);
    let x = DVector::zeros(inst.a.nrows());
    let sol = solve(
        &MpcProblem {
            benchmark: &inst.bench,
            params: &inst.params,
            step: 0,
            state: &x,
            warm_start: None,
        },
        &SolverConfig::default(),
    )
    .unwrap();
    assert_eq!(sol.status, SolveStatus::Converged);
    assert!(sol.inputs.iter().all(|u| u.amax() == 0.0));
}

fn trailer_state(rng: &mut bmpc_core::rng::SimRng) -> DVector<f64> {
    let phi = rng.random_range(-0.3..0.3);
    DVector::from_vec(vec![
        rng.random_range(-2.0..2.0),
        phi,
        rng.random_range(-0.2..0.2),
        phi + rng.random_range(-0.4..0.4),
        rng.random_range(4.0..8.0),
        rng.random_range(-0.2..0.2),
    ])
}

#[test]
fn trailer_solutions_respect_input_box_and_count() {
    let cfg = trailer_config();
    let bench = trailer_bench(&cfg);
    let theta = trailer_truth(&bench, &cfg);
    let mut rng = rng(5);
    for _ in 0..10 {
        let k = rng.random_range(0..cfg.horizon);
        let x = trailer_state(&mut rng);
        let sol = solve(
            &MpcProblem {
                benchmark: &bench,
                params: &theta,
                step: k,
                state: &x,
                warm_start: None,
            },
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(sol.decision_variables(), (cfg.horizon - k) * 3);
        for u in &sol.inputs {
            assert!(u[OMEGA].abs() <= cfg.max_steering_rate);
            assert!(u[ACCEL].abs() <= cfg.max_acceleration);
        }
        assert!(sol.slacks.iter().all(|e| *e >= 0.0));
        let accepted: Vec<f64> = sol.trace.iter().map(|t| t.merit).collect();
        assert!(accepted.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn strictly_feasible_trajectory_has_zero_slacks() {
    let cfg = trailer_config();
    let bench = trailer_bench(&cfg);
    let theta = trailer_truth(&bench, &cfg);
    // Aligned at the goal and at rest.
    let x = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 3.0, 0.0]);
    let sol = solve(
        &MpcProblem {
            benchmark: &bench,
            params: &theta,
            step: 0,
            state: &x,
            warm_start: None,
        },
        &SolverConfig::default(),
    )
    .unwrap();
    assert!(sol.slacks.iter().all(|e| *e == 0.0));
}

#[test]
fn solve_is_deterministic() {
    let cfg = trailer_config();
    let bench = trailer_bench(&cfg);
    let theta = trailer_truth(&bench, &cfg);
    let x = DVector::from_vec(vec![1.0, 0.1, 0.0, -0.2, 6.0, 0.1]);
    let problem = MpcProblem {
        benchmark: &bench,
        params: &theta,
        step: 0,
        state: &x,
        warm_start: None,
    };
    let a = solve(&problem, &SolverConfig::default()).unwrap();
    let b = solve(&problem, &SolverConfig::default()).unwrap();
    assert_eq!(a, b);
}
