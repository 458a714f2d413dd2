//! Stage costs, state constraints and the soft-constraint penalty.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{trailer_index::*, TrailerGeometry};
use crate::rng::SimRng;

/// Value, gradient and a positive-semidefinite Gauss-Newton Hessian of one
/// stage cost around `(x, u)`.
#[derive(Debug, Clone)]
pub struct StageModel {
    pub value: f64,
    pub grad_x: DVector<f64>,
    pub grad_u: DVector<f64>,
    pub hess_xx: DMatrix<f64>,
    pub hess_xu: DMatrix<f64>,
    pub hess_uu: DMatrix<f64>,
}

impl StageModel {
    fn zero(n: usize, m: usize, value: f64) -> Self {
        Self {
            value,
            grad_x: DVector::zeros(n),
            grad_u: DVector::zeros(m),
            hess_xx: DMatrix::zeros(n, n),
            hess_xu: DMatrix::zeros(n, m),
            hess_uu: DMatrix::zeros(m, m),
        }
    }

    pub fn is_flat(&self) -> bool {
        self.grad_x.iter().all(|v| *v == 0.0)
            && self.grad_u.iter().all(|v| *v == 0.0)
            && self.hess_xx.iter().all(|v| *v == 0.0)
            && self.hess_xu.iter().all(|v| *v == 0.0)
            && self.hess_uu.iter().all(|v| *v == 0.0)
    }
}

/// A time-varying stage cost `known(k,x,u) + theta^T phi(k,x,u)`.
pub trait Objective: Send + Sync + std::fmt::Debug {
    /// Episode length `N`; valid steps are `0..N`.
    fn horizon(&self) -> usize;

    fn feature_count(&self) -> usize;

    /// Standard deviation of the cost-measurement noise.
    fn measurement_std(&self) -> f64;

    fn known_cost(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64;

    fn features(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    fn stage_model(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> StageModel;

    fn check_step(&self, k: usize) -> Result<()> {
        if k >= self.horizon() {
            return Err(Error::contract(format!(
                "step {k} outside 0..{}",
                self.horizon()
            )));
        }
        Ok(())
    }

    fn stage_cost(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> Result<f64> {
        self.check_step(k)?;
        if theta.len() != self.feature_count() {
            return Err(Error::contract("objective parameter length mismatch"));
        }
        Ok(self.known_cost(k, x, u) + theta.dot(&self.features(k, x, u)))
    }

    /// Stage cost plus `N(0, sigma_eps^2)` measurement noise.
    fn observe_cost(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
        rng: &mut SimRng,
    ) -> Result<f64> {
        let z: f64 = rng.sample(StandardNormal);
        Ok(self.stage_cost(k, x, u, theta)? + self.measurement_std() * z)
    }
}

/// Terminal-only reverse-parking cost for the car-trailer.
///
/// At `k = N-1`: `phi^2 + kappa^2 + v^2 + x_t^2 + y_t^2 + theta^T [x_c^2, x_c, y_c^2, y_c]`;
/// zero at every earlier step. A goal `(x_d, y_d)` is encoded as
/// `theta = [1, -2 x_d, 1, -2 y_d]`, dropping the constant `x_d^2 + y_d^2`.
#[derive(Debug, Clone)]
pub struct TrailerObjective {
    pub horizon: usize,
    pub geometry: TrailerGeometry,
    pub noise_std: f64,
}

impl TrailerObjective {
    pub fn new(horizon: usize, geometry: TrailerGeometry, noise_std: f64) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::contract("horizon must be >= 1"));
        }
        if !(noise_std >= 0.0) {
            return Err(Error::contract("cost noise std must be >= 0"));
        }
        Ok(Self {
            horizon,
            geometry,
            noise_std,
        })
    }

    pub fn goal_params(x_d: f64, y_d: f64) -> DVector<f64> {
        DVector::from_vec(vec![1.0, -2.0 * x_d, 1.0, -2.0 * y_d])
    }

    fn is_terminal(&self, k: usize) -> bool {
        k + 1 == self.horizon
    }
}

impl Objective for TrailerObjective {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn feature_count(&self) -> usize {
        4
    }

    fn measurement_std(&self) -> f64 {
        self.noise_std
    }

    fn known_cost(&self, k: usize, x: &DVector<f64>, _u: &DVector<f64>) -> f64 {
        if !self.is_terminal(k) {
            return 0.0;
        }
        let g = &self.geometry;
        let xt = x[X_C] - g.hitch_offset * x[PHI].cos() - g.trailer_length * x[KAPPA].cos();
        let yt = x[Y_C] - g.hitch_offset * x[PHI].sin() - g.trailer_length * x[KAPPA].sin();
        x[PHI].powi(2) + x[KAPPA].powi(2) + x[V_C].powi(2) + xt * xt + yt * yt
    }

    fn features(&self, k: usize, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        if !self.is_terminal(k) {
            return DVector::zeros(4);
        }
        DVector::from_vec(vec![x[X_C] * x[X_C], x[X_C], x[Y_C] * x[Y_C], x[Y_C]])
    }

    fn stage_model(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> StageModel {
        let n = x.len();
        if !self.is_terminal(k) {
            return StageModel::zero(n, u.len(), 0.0);
        }
        let g = &self.geometry;
        let (sp, cp) = x[PHI].sin_cos();
        let (sk, ck) = x[KAPPA].sin_cos();
        let xt = x[X_C] - g.hitch_offset * cp - g.trailer_length * ck;
        let yt = x[Y_C] - g.hitch_offset * sp - g.trailer_length * sk;

        let mut dxt = DVector::zeros(n);
        dxt[X_C] = 1.0;
        dxt[PHI] = g.hitch_offset * sp;
        dxt[KAPPA] = g.trailer_length * sk;
        let mut dyt = DVector::zeros(n);
        dyt[Y_C] = 1.0;
        dyt[PHI] = -g.hitch_offset * cp;
        dyt[KAPPA] = -g.trailer_length * ck;

        let mut model = StageModel::zero(n, u.len(), 0.0);
        model.value = self.known_cost(k, x, u) + theta.dot(&self.features(k, x, u));
        let gx = &mut model.grad_x;
        for i in [PHI, KAPPA, V_C] {
            gx[i] += 2.0 * x[i];
            model.hess_xx[(i, i)] += 2.0;
        }
        gx.axpy(2.0 * xt, &dxt, 1.0);
        gx.axpy(2.0 * yt, &dyt, 1.0);
        gx[X_C] += 2.0 * theta[0] * x[X_C] + theta[1];
        gx[Y_C] += 2.0 * theta[2] * x[Y_C] + theta[3];

        let h = &mut model.hess_xx;
        h.ger(2.0, &dxt, &dxt, 1.0);
        h.ger(2.0, &dyt, &dyt, 1.0);
        h[(X_C, X_C)] += 2.0 * theta[0].max(0.0);
        h[(Y_C, Y_C)] += 2.0 * theta[2].max(0.0);
        model
    }
}

/// Quadratic stage cost `theta_0 x^T Q x + theta_1 u^T R u` at every step.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub noise_std: f64,
}

impl QuadraticObjective {
    pub fn new(horizon: usize, q: DMatrix<f64>, r: DMatrix<f64>, noise_std: f64) -> Result<Self> {
        if horizon == 0 || !q.is_square() || !r.is_square() {
            return Err(Error::contract("invalid quadratic objective dimensions"));
        }
        if !(noise_std >= 0.0) {
            return Err(Error::contract("cost noise std must be >= 0"));
        }
        Ok(Self {
            horizon,
            q,
            r,
            noise_std,
        })
    }

    pub fn unit_params() -> DVector<f64> {
        DVector::from_vec(vec![1.0, 1.0])
    }
}

impl Objective for QuadraticObjective {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn feature_count(&self) -> usize {
        2
    }

    fn measurement_std(&self) -> f64 {
        self.noise_std
    }

    fn known_cost(&self, _k: usize, _x: &DVector<f64>, _u: &DVector<f64>) -> f64 {
        0.0
    }

    fn features(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![
            x.dot(&(&self.q * x)),
            u.dot(&(&self.r * u)),
        ])
    }

    fn stage_model(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> StageModel {
        let qs = theta[0];
        let rs = theta[1];
        StageModel {
            value: theta.dot(&self.features(k, x, u)),
            grad_x: (&self.q * x) * (2.0 * qs),
            grad_u: (&self.r * u) * (2.0 * rs),
            hess_xx: &self.q * (2.0 * qs.max(0.0)),
            hess_xu: DMatrix::zeros(x.len(), u.len()),
            hess_uu: &self.r * (2.0 * rs.max(0.0)),
        }
    }
}

/// State inequality rows `g(x) <= 0`.
pub trait StateConstraints: Send + Sync + std::fmt::Debug {
    fn count(&self) -> usize;
    fn values(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Unconstrained;

impl StateConstraints for Unconstrained {
    fn count(&self) -> usize {
        0
    }

    fn values(&self, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(0, x.len())
    }
}

/// Articulation, position and steering limits of the car-trailer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrailerConstraints {
    pub max_articulation: f64,
    pub min_x_c: f64,
    pub max_steering: f64,
}

impl Default for TrailerConstraints {
    fn default() -> Self {
        Self {
            max_articulation: 0.7,
            min_x_c: 1.0,
            max_steering: 0.7,
        }
    }
}

impl StateConstraints for TrailerConstraints {
    fn count(&self) -> usize {
        5
    }

    /// Rows: `(kappa-phi) - c`, `-(kappa-phi) - c`, `x_min - x_c`, `delta - d`, `-delta - d`.
    fn values(&self, x: &DVector<f64>) -> DVector<f64> {
        let rel = x[KAPPA] - x[PHI];
        DVector::from_vec(vec![
            rel - self.max_articulation,
            -rel - self.max_articulation,
            self.min_x_c - x[X_C],
            x[DELTA] - self.max_steering,
            -x[DELTA] - self.max_steering,
        ])
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(5, x.len());
        j[(0, KAPPA)] = 1.0;
        j[(0, PHI)] = -1.0;
        j[(1, KAPPA)] = -1.0;
        j[(1, PHI)] = 1.0;
        j[(2, X_C)] = -1.0;
        j[(3, DELTA)] = 1.0;
        j[(4, DELTA)] = -1.0;
        j
    }
}

/// Symmetric box `|x_i| <= bound_i` on selected states.
#[derive(Debug, Clone)]
pub struct StateBox {
    pub bounds: Vec<(usize, f64)>,
}

impl StateConstraints for StateBox {
    fn count(&self) -> usize {
        2 * self.bounds.len()
    }

    fn values(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.count(),
            self.bounds
                .iter()
                .flat_map(|&(i, b)| [x[i] - b, -x[i] - b]),
        )
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.count(), x.len());
        for (r, &(i, _)) in self.bounds.iter().enumerate() {
            j[(2 * r, i)] = 1.0;
            j[(2 * r + 1, i)] = -1.0;
        }
        j
    }
}

/// Input box, soft state constraints and slack penalty weights.
///
/// One slack `eps_i >= 0` per predicted step is shared by all state rows:
/// `g(x_i) <= eps_i`. The penalty is `I(eps) = c1 * sum(eps) + c2 * eps^T eps`.
#[derive(Debug, Clone)]
pub struct ConstraintSpec {
    pub input_lower: DVector<f64>,
    pub input_upper: DVector<f64>,
    pub state: Arc<dyn StateConstraints>,
    pub linear_weight: f64,
    pub quadratic_weight: f64,
}

impl ConstraintSpec {
    pub fn new(
        input_lower: DVector<f64>,
        input_upper: DVector<f64>,
        state: Arc<dyn StateConstraints>,
        linear_weight: f64,
        quadratic_weight: f64,
    ) -> Result<Self> {
        if input_lower.len() != input_upper.len() {
            return Err(Error::contract("input bound lengths differ"));
        }
        if input_lower.iter().zip(input_upper.iter()).any(|(l, u)| !(l <= u)) {
            return Err(Error::contract("input lower bound exceeds upper bound"));
        }
        if !(linear_weight > 0.0) || !(quadratic_weight >= 0.0) {
            return Err(Error::contract(
                "slack weights require c1 > 0 and c2 >= 0",
            ));
        }
        Ok(Self {
            input_lower,
            input_upper,
            state,
            linear_weight,
            quadratic_weight,
        })
    }

    pub fn constraint_values(&self, x: &DVector<f64>) -> DVector<f64> {
        self.state.values(x)
    }

    /// Smallest admissible slack for state `x`: `max(0, max_j g_j(x))`.
    pub fn required_slack(&self, x: &DVector<f64>) -> f64 {
        self.state.values(x).iter().fold(0.0, |acc, &g| acc.max(g))
    }

    fn penalty_unchecked(&self, eps: f64) -> f64 {
        self.linear_weight * eps + self.quadratic_weight * eps * eps
    }

    pub fn slack_penalty(&self, slacks: &[f64]) -> Result<f64> {
        if let Some(e) = slacks.iter().find(|e| !(**e >= 0.0)) {
            return Err(Error::contract(format!("slack {e} is negative")));
        }
        Ok(slacks.iter().map(|&e| self.penalty_unchecked(e)).sum())
    }

    /// Penalty charged for visiting state `x` with the minimal slack.
    pub fn state_penalty(&self, x: &DVector<f64>) -> f64 {
        self.penalty_unchecked(self.required_slack(x))
    }

    /// Projects `u` onto the input box in place.
    pub fn clamp_input(&self, u: &mut DVector<f64>) {
        for ((v, lo), hi) in u
            .iter_mut()
            .zip(self.input_lower.iter())
            .zip(self.input_upper.iter())
        {
            *v = v.clamp(*lo, *hi);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trailer_objective() -> TrailerObjective {
        TrailerObjective::new(40, TrailerGeometry::default(), 0.5).unwrap()
    }

    fn trailer_constraints(c1: f64, c2: f64) -> ConstraintSpec {
        ConstraintSpec::new(
            DVector::from_vec(vec![-1.22, -2.0]),
            DVector::from_vec(vec![1.22, 2.0]),
            Arc::new(TrailerConstraints::default()),
            c1,
            c2,
        )
        .unwrap()
    }

    #[test]
    fn non_terminal_stages_are_free() {
        let obj = trailer_objective();
        let x = DVector::from_vec(vec![1.0, 0.2, 0.1, -0.3, 5.0, 1.0]);
        let c = obj
            .stage_cost(0, &x, &DVector::zeros(2), &TrailerObjective::goal_params(3.0, 0.0))
            .unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn step_out_of_range_is_rejected() {
        let obj = trailer_objective();
        let x = DVector::zeros(6);
        assert!(obj
            .stage_cost(40, &x, &DVector::zeros(2), &DVector::zeros(4))
            .is_err());
    }

    #[test]
    fn terminal_cost_vanishes_with_trailer_at_origin() {
        // Aligned, at rest, trailer axle at the origin: x_c = a + b.
        let obj = trailer_objective();
        let mut x = DVector::zeros(6);
        x[X_C] = 3.0;
        let c = obj
            .stage_cost(39, &x, &DVector::zeros(2), &DVector::zeros(4))
            .unwrap();
        assert!(c.abs() < 1e-15);
    }

    #[test]
    fn terminal_cost_at_goal_is_dropped_constant() {
        // Car at its goal with the trailer at the origin: only -(x_d^2 + y_d^2) remains.
        let obj = trailer_objective();
        let mut x = DVector::zeros(6);
        x[X_C] = 3.0;
        let c = obj
            .stage_cost(39, &x, &DVector::zeros(2), &TrailerObjective::goal_params(3.0, 0.0))
            .unwrap();
        assert!((c + 9.0).abs() < 1e-12);
    }

    #[test]
    fn noiseless_observation_equals_cost() {
        let obj = TrailerObjective::new(40, TrailerGeometry::default(), 0.0).unwrap();
        let x = DVector::from_vec(vec![0.5, 0.1, 0.0, 0.2, 4.0, 0.3]);
        let theta = TrailerObjective::goal_params(3.2, 0.4);
        let mut rng = <SimRng as rand::SeedableRng>::seed_from_u64(1);
        let u = DVector::zeros(2);
        assert_eq!(
            obj.observe_cost(39, &x, &u, &theta, &mut rng).unwrap(),
            obj.stage_cost(39, &x, &u, &theta).unwrap()
        );
    }

    #[test]
    fn observation_noise_is_seeded() {
        let obj = trailer_objective();
        let x = DVector::from_vec(vec![0.5, 0.1, 0.0, 0.2, 4.0, 0.3]);
        let theta = TrailerObjective::goal_params(3.2, 0.4);
        let u = DVector::zeros(2);
        let draw = |seed| {
            let mut rng = <SimRng as rand::SeedableRng>::seed_from_u64(seed);
            obj.observe_cost(39, &x, &u, &theta, &mut rng).unwrap()
        };
        assert_eq!(draw(4), draw(4));
        assert_ne!(draw(4), draw(5));
    }

    #[test]
    fn constraint_rows() {
        let c = trailer_constraints(100.0, 10.0);
        let mut x = DVector::zeros(6);
        x[X_C] = 5.0;
        assert_eq!(
            c.constraint_values(&x),
            DVector::from_vec(vec![-0.7, -0.7, -4.0, -0.7, -0.7])
        );
        x[X_C] = 1.0;
        assert_eq!(c.constraint_values(&x)[2], 0.0);
        x[KAPPA] = 0.9;
        assert!((c.constraint_values(&x)[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn slack_penalty_values() {
        let c = trailer_constraints(100.0, 10.0);
        assert_eq!(c.slack_penalty(&[0.0; 5]).unwrap(), 0.0);
        assert!((c.slack_penalty(&[0.1]).unwrap() - 10.1).abs() < 1e-12);
        let lin = trailer_constraints(100.0, 0.0);
        let p1 = lin.slack_penalty(&[0.3, 0.2]).unwrap();
        let p2 = lin.slack_penalty(&[0.6, 0.4]).unwrap();
        assert!((p2 - 2.0 * p1).abs() < 1e-12);
        assert!(matches!(c.slack_penalty(&[-0.1]), Err(Error::Contract(_))));
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(ConstraintSpec::new(
            DVector::zeros(1),
            DVector::zeros(1),
            Arc::new(Unconstrained),
            0.0,
            1.0
        )
        .is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let obj = trailer_objective();
        let theta = DVector::from_vec(vec![0.9, -5.5, 1.1, 0.7]);
        let x = DVector::from_vec(vec![0.4, 0.2, 0.1, -0.3, 3.5, -0.6]);
        let u = DVector::zeros(2);
        let model = obj.stage_model(39, &x, &u, &theta);
        for i in 0..6 {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (obj.stage_cost(39, &xp, &u, &theta).unwrap()
                - obj.stage_cost(39, &xm, &u, &theta).unwrap())
                / (2.0 * h);
            assert!((fd - model.grad_x[i]).abs() < 1e-6, "state {i}");
        }
        assert!((model.value - obj.stage_cost(39, &x, &u, &theta).unwrap()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn cost_is_linear_in_parameters(
            a in -3.0..3.0f64, b in -3.0..3.0f64,
            t in proptest::collection::vec(-2.0..2.0f64, 8),
            s in proptest::collection::vec(-2.0..2.0f64, 6),
        ) {
            let obj = trailer_objective();
            let x = DVector::from_vec(vec![s[0], 0.3 * s[1], 0.3 * s[2], 0.3 * s[3], 3.0 + s[4], s[5]]);
            let u = DVector::zeros(2);
            let t1 = DVector::from_vec(t[..4].to_vec());
            let t2 = DVector::from_vec(t[4..].to_vec());
            let known = obj.known_cost(39, &x, &u);
            let mix = obj.stage_cost(39, &x, &u, &(&t1 * a + &t2 * b)).unwrap() - known;
            let sep = a * (obj.stage_cost(39, &x, &u, &t1).unwrap() - known)
                + b * (obj.stage_cost(39, &x, &u, &t2).unwrap() - known);
            prop_assert!((mix - sep).abs() < 1e-9 * (1.0 + mix.abs()));
        }

        #[test]
        fn penalty_is_monotone_and_convex(
            e1 in 0.0..5.0f64, e2 in 0.0..5.0f64, d in 0.0..1.0f64, w in 0.0..1.0f64,
        ) {
            let c = trailer_constraints(100.0, 10.0);
            let p = |e: f64| c.slack_penalty(&[e]).unwrap();
            prop_assert!(p(e1 + d) >= p(e1));
            let mid = w * e1 + (1.0 - w) * e2;
            prop_assert!(p(mid) <= w * p(e1) + (1.0 - w) * p(e2) + 1e-9);
        }

        #[test]
        fn constraint_sign_matches_membership(
            y in -3.0..3.0f64, phi in -1.5..1.5f64, delta in -1.2..1.2f64,
            kappa in -1.5..1.5f64, xc in -1.0..6.0f64, v in -2.0..2.0f64,
        ) {
            let c = trailer_constraints(100.0, 10.0);
            let x = DVector::from_vec(vec![y, phi, delta, kappa, xc, v]);
            let inside = (kappa - phi).abs() <= 0.7 && xc >= 1.0 && delta.abs() <= 0.7;
            let g = c.constraint_values(&x);
            prop_assert_eq!(g.iter().all(|v| *v <= 0.0), inside);
        }
    }
}
