mod common;

use bmpc_core::config::{BenchmarkConfig, ExperimentConfig};
use bmpc_core::harness::{run_learning, run_population, ExperimentState, Role};
use bmpc_core::inference::BeliefBundle;
use bmpc_core::rng::{SeedableRng, SimRng};
use bmpc_core::{policy, NoiseScript, SolverConfig};
use common::*;
use nalgebra::DVector;

fn small_trailer(systems: usize, episodes: usize) -> ExperimentConfig {
    let mut t = trailer_config();
    t.horizon = 10;
    ExperimentConfig::new(BenchmarkConfig::CarTrailer(t), systems, episodes)
}

#[test]
fn point_mass_prior_has_zero_regret() {
    for mut cfg in [small_trailer(1, 3), lq_config(0.05, 0.1)] {
        cfg.prior.point_mass = true;
        let (report, _) = run_learning(&cfg, 0).unwrap();
        assert_eq!(report.episodes.len(), cfg.episodes);
        for e in &report.episodes {
            assert_eq!(e.sampled_regret, 0.0, "episode {}", e.episode);
            assert_eq!(e.cumulative_regret, 0.0);
        }
    }
}

#[test]
fn zero_episodes_give_an_empty_report() {
    let mut cfg = lq_config(0.05, 0.1);
    cfg.episodes = 0;
    cfg.systems = 2;
    let report = run_population(&cfg).unwrap();
    assert!(report.stats.is_empty());
    assert_eq!(report.systems.len(), 2);
    assert!(report.systems.iter().all(|s| s.episodes.is_empty()));
    assert!(report.rows().is_empty());
}

#[test]
fn noiseless_closed_loop_cost_equals_planned_cost() {
    let cfg = lq_config(0.0, 0.0);
    let state = ExperimentState::from_config(&cfg, 0).unwrap();
    let bench = state.benchmark();
    let x0 = DVector::from_vec(vec![0.8, -0.5]);
    let rec = state
        .run_episode(state.truth(), Some(&zero_script(bench, x0.clone())), Role::Oracle)
        .unwrap();
    let solver = SolverConfig {
        kkt_tolerance: 1e-10,
        ..SolverConfig::default()
    };
    let (_, sol) = policy(bench, state.truth(), 0, &x0, None, &solver).unwrap();
    let err = (rec.realized_cost - sol.objective).abs() / sol.objective.abs();
    assert!(err < 1e-6, "closed loop {} vs plan {}", rec.realized_cost, sol.objective);
}

#[test]
fn noiseless_trailer_closed_loop_follows_the_plan() {
    let mut t = trailer_config();
    t.process_noise_rates = [0.0; 6];
    t.cost_noise_std = 0.0;
    let cfg = ExperimentConfig::new(BenchmarkConfig::CarTrailer(t), 1, 1);
    let state = ExperimentState::from_config(&cfg, 0).unwrap();
    let bench = state.benchmark();
    let x0 = DVector::from_vec(vec![1.0, 0.1, 0.0, -0.1, 6.0, 0.0]);
    let rec = state
        .run_episode(state.truth(), Some(&zero_script(bench, x0.clone())), Role::Oracle)
        .unwrap();
    let (_, sol) = policy(bench, state.truth(), 0, &x0, None, &state.solver).unwrap();
    let err = (rec.realized_cost - sol.objective).abs() / sol.objective.abs().max(1.0);
    assert!(err < 1e-6, "closed loop {} vs plan {}", rec.realized_cost, sol.objective);
}

#[test]
fn episode_records_chain_and_replay() {
    let cfg = small_trailer(1, 1);
    let state = ExperimentState::from_config(&cfg, 0).unwrap();
    let bench = state.benchmark();
    let script = NoiseScript::draw(bench, &mut SimRng::seed_from_u64(state.episode_seed(0)));
    let theta = state.belief.mean_params();
    let a = state.run_episode(&theta, Some(&script), Role::Sampled).unwrap();
    let b = state.run_episode(&theta, Some(&script), Role::Sampled).unwrap();
    assert_eq!(a, b);
    // Without a script the episode's own stream is drawn, which is the same.
    let c = state.run_episode(&theta, None, Role::Sampled).unwrap();
    assert_eq!(a, c);

    assert_eq!(a.transitions.len(), bench.horizon());
    assert_eq!(a.transitions[0].state, script.initial_state);
    for w in a.transitions.windows(2) {
        assert_eq!(w[0].next_state, w[1].state);
    }
    for (k, t) in a.transitions.iter().enumerate() {
        let nominal = bench.system.step_nominal(&t.state, &t.input, &state.truth().dynamics).unwrap();
        assert_eq!(t.next_state, nominal + &script.process[k]);
    }
    let realized: f64 = a
        .transitions
        .iter()
        .map(|t| bench.realized_stage_cost(t.step, &t.state, &t.input, &state.truth().objective).unwrap())
        .sum();
    assert_eq!(realized, a.realized_cost);
}

#[test]
fn short_noise_script_is_rejected() {
    let cfg = lq_config(0.05, 0.1);
    let state = ExperimentState::from_config(&cfg, 0).unwrap();
    let mut script = zero_script(state.benchmark(), DVector::zeros(2));
    script.process.pop();
    assert!(state.run_episode(state.truth(), Some(&script), Role::Oracle).is_err());
}

#[test]
fn learning_is_reproducible() {
    let cfg = small_trailer(1, 3);
    let (ra, a) = run_learning(&cfg, 0).unwrap();
    let (rb, b) = run_learning(&cfg, 0).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
    assert_eq!(a.len(), 6);
    assert_eq!(a[0].role, Role::Sampled);
    assert_eq!(a[1].role, Role::Oracle);
    // Paired noise.
    assert_eq!(a[0].noise, a[1].noise);
}

#[test]
fn population_csv_is_reproducible_across_thread_counts() {
    let mut cfg = lq_config(0.05, 0.1);
    cfg.systems = 3;
    cfg.threads = 1;
    let mut first = Vec::new();
    run_population(&cfg).unwrap().write_csv(&mut first).unwrap();
    cfg.threads = 3;
    let mut second = Vec::new();
    run_population(&cfg).unwrap().write_csv(&mut second).unwrap();
    assert_eq!(first, second);
    assert_eq!(String::from_utf8(first).unwrap().lines().count(), 1 + 3 * cfg.episodes);
}

#[test]
fn single_system_population_matches_learning_run() {
    let mut cfg = lq_config(0.05, 0.1);
    cfg.systems = 1;
    let population = run_population(&cfg).unwrap();
    let (single, _) = run_learning(&cfg, 0).unwrap();
    assert_eq!(population.systems, vec![single.clone()]);
    assert!(population.failures.is_empty());
    for (s, e) in population.stats.iter().zip(&single.episodes) {
        assert_eq!(s.median, e.sampled_regret);
    }
}

fn replay_beliefs(prior: &BeliefBundle, records: &[bmpc_core::EpisodeRecord], state: &ExperimentState) -> Vec<Vec<f64>> {
    let mut belief = prior.clone();
    let mut traces = Vec::new();
    for r in records.iter().filter(|r| r.role == Role::Sampled) {
        belief = belief.absorb_episode(&r.transitions, state.benchmark()).unwrap();
        traces.push(belief.traces());
    }
    traces
}

#[test]
fn belief_depends_on_records_only() {
    let cfg = lq_config(0.05, 0.1);
    let (report, records) = run_learning(&cfg, 0).unwrap();
    let state = ExperimentState::from_config(&cfg, 0).unwrap();
    let prior = state.belief.clone();
    let expected: Vec<Vec<f64>> = report.episodes.iter().map(|e| e.posterior_traces.clone()).collect();
    assert_eq!(replay_beliefs(&prior, &records, &state), expected);

    // A learner holding different true parameters reaches the same belief
    // from the same records.
    let mut other_truth = state.truth().clone();
    other_truth.objective[0] += 0.5;
    other_truth.dynamics.0[1][0] += 0.1;
    let perturbed = ExperimentState::new(
        state.benchmark().clone(),
        other_truth,
        prior.clone(),
        0,
        state.seed,
        state.solver,
    )
    .unwrap();
    assert_eq!(replay_beliefs(&perturbed.belief, &records, &perturbed), expected);
}

#[test]
fn posterior_traces_shrink_with_excited_data() {
    let cfg = lq_config(0.05, 0.1);
    let mut state = ExperimentState::from_config(&cfg, 0).unwrap();
    let mut previous = state.belief.traces();
    for _ in 0..3 {
        state.advance().unwrap();
        let traces = state.report.episodes.last().unwrap().posterior_traces.clone();
        for (now, before) in traces.iter().zip(&previous) {
            assert!(now < before, "{traces:?} vs {previous:?}");
        }
        previous = traces;
    }
}

#[test]
fn cumulative_regret_accumulates_sampled_regret() {
    let cfg = lq_config(0.05, 0.1);
    let (report, records) = run_learning(&cfg, 0).unwrap();
    let mut total = 0.0;
    for (e, pair) in report.episodes.iter().zip(records.chunks(2)) {
        let delta = pair[0].realized_cost - pair[1].realized_cost;
        assert_eq!(e.sampled_regret, delta);
        total += delta;
        assert_eq!(e.cumulative_regret, total);
        assert_eq!(e.status_counts.total(), 2 * 10);
    }
}
