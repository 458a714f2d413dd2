//! Soft-constrained shrinking-horizon MPC.
//!
//! The problem at step `k` optimizes inputs `u_k..u_{N-1}` and one slack per
//! predicted step. States are eliminated by single shooting, so predictions
//! satisfy the dynamics by construction. Each iteration builds a Gauss-Newton
//! model of the cost, linearizes the soft state constraints and solves the
//! resulting QP (input box and `eps >= 0` as bounds) with a Levenberg term
//! on the step. Slacks are reset to their minimal admissible values after each
//! step, so the merit function is the exact-penalty objective in the inputs.

mod qp;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::benchmark::Benchmark;
use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::objective::StageModel;
use qp::Constraint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub kkt_tolerance: f64,
    /// Initial Levenberg regularization.
    pub regularization: f64,
    pub min_regularization: f64,
    pub max_regularization: f64,
    /// Minimum actual/predicted reduction ratio for accepting a step.
    pub acceptance_ratio: f64,
    /// Replace analytic dynamics Jacobians by central differences.
    pub finite_differences: bool,
    pub hessian: HessianModel,
}

/// Second-order model of the shooting objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianModel {
    /// Stage-cost Hessians only.
    GaussNewton,
    /// Adds adjoint-weighted dynamics curvature, projected onto the PSD cone.
    Exact,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            kkt_tolerance: 1e-6,
            regularization: 1e-3,
            min_regularization: 1e-10,
            max_regularization: 1e10,
            acceptance_ratio: 1e-4,
            finite_differences: false,
            hessian: HessianModel::GaussNewton,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("kkt_tolerance", self.kkt_tolerance),
            ("regularization", self.regularization),
            ("min_regularization", self.min_regularization),
            ("max_regularization", self.max_regularization),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("solver.{field}"), "must be positive"));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::config("solver.max_iterations", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.acceptance_ratio) {
            return Err(Error::config("solver.acceptance_ratio", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    InfeasibleSubproblem,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIterations => "max_iterations",
            SolveStatus::InfeasibleSubproblem => "infeasible_subproblem",
        }
    }
}

/// One row of the per-solve iteration trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub merit: f64,
    pub kkt_residual: f64,
    pub regularization: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    /// `u_{k|k} .. u_{N-1|k}`
    pub inputs: Vec<DVector<f64>>,
    /// `x_{k|k} .. x_{N-1|k}`
    pub states: Vec<DVector<f64>>,
    /// `eps_k .. eps_{N-1}`
    pub slacks: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub trace: Vec<TraceRow>,
}

impl MpcSolution {
    pub fn decision_variables(&self) -> usize {
        self.inputs.iter().map(|u| u.len()).sum::<usize>() + self.slacks.len()
    }

    /// Warm start for the next step: drop the applied input and pad by
    /// repeating the last one up to `len`.
    pub fn shifted(&self, len: usize) -> Option<Vec<DVector<f64>>> {
        if len == 0 || self.inputs.is_empty() {
            return None;
        }
        let mut next: Vec<_> = self.inputs.iter().skip(1).take(len).cloned().collect();
        let last = self.inputs.last().unwrap().clone();
        while next.len() < len {
            next.push(last.clone());
        }
        Some(next)
    }
}

#[derive(Debug, Clone)]
pub struct MpcProblem<'a> {
    pub benchmark: &'a Benchmark,
    pub params: &'a ParamVector,
    pub step: usize,
    pub state: &'a DVector<f64>,
    pub warm_start: Option<&'a [DVector<f64>]>,
}

/// Rollout of an input sequence with everything the linearization needs.
struct Evaluation {
    states: Vec<DVector<f64>>,
    jac_x: Vec<DMatrix<f64>>,
    jac_u: Vec<DMatrix<f64>>,
    slacks: Vec<f64>,
    merit: f64,
}

struct Linearization {
    grad: DVector<f64>,
    hess: DMatrix<f64>,
    /// Per predicted step: `(g(x_h), dg/dU)`.
    rows: Vec<(DVector<f64>, DMatrix<f64>)>,
}

struct Shooting<'a> {
    bench: &'a Benchmark,
    params: &'a ParamVector,
    step: usize,
    x0: &'a DVector<f64>,
    horizon: usize,
    m: usize,
    finite_differences: bool,
}

impl<'a> Shooting<'a> {
    fn jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let sys = &self.bench.system;
        let theta = &self.params.dynamics;
        if !self.finite_differences {
            return sys.jacobians(x, u, theta);
        }
        let h = 1e-6;
        let n = x.len();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, u.len());
        for i in 0..n {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let col = (sys.step_nominal(&xp, u, theta)? - sys.step_nominal(&xm, u, theta)?)
                / (2.0 * h);
            a.set_column(i, &col);
        }
        for j in 0..u.len() {
            let (mut up, mut um) = (u.clone(), u.clone());
            up[j] += h;
            um[j] -= h;
            let col = (sys.step_nominal(x, &up, theta)? - sys.step_nominal(x, &um, theta)?)
                / (2.0 * h);
            b.set_column(j, &col);
        }
        Ok((a, b))
    }

    fn input(&self, us: &DVector<f64>, h: usize) -> DVector<f64> {
        us.rows(h * self.m, self.m).into_owned()
    }

    /// Returns `None` when the rollout leaves the model's domain.
    fn evaluate(&self, us: &DVector<f64>) -> Option<Evaluation> {
        let bench = self.bench;
        let mut states = Vec::with_capacity(self.horizon);
        let mut jac_x = Vec::with_capacity(self.horizon);
        let mut jac_u = Vec::with_capacity(self.horizon);
        let mut slacks = Vec::with_capacity(self.horizon);
        let mut merit = 0.0;
        let mut x = self.x0.clone();
        for h in 0..self.horizon {
            let u = self.input(us, h);
            let k = self.step + h;
            let eps = bench.constraints.required_slack(&x);
            merit += bench
                .objective
                .stage_cost(k, &x, &u, &self.params.objective)
                .ok()?;
            merit += bench.constraints.slack_penalty(&[eps]).ok()?;
            slacks.push(eps);
            if h + 1 < self.horizon {
                let (a, b) = self.jacobians(&x, &u).ok()?;
                let next = bench
                    .system
                    .step_nominal(&x, &u, &self.params.dynamics)
                    .ok()?;
                jac_x.push(a);
                jac_u.push(b);
                states.push(std::mem::replace(&mut x, next));
            } else {
                states.push(x.clone());
            }
        }
        if !merit.is_finite() || states.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return None;
        }
        Some(Evaluation {
            states,
            jac_x,
            jac_u,
            slacks,
            merit,
        })
    }

    /// Gradient, Hessian model and constraint linearization at `us`.
    ///
    /// With `curvature`, the Hessian is the exact reduced Hessian of the
    /// Lagrangian: stage Hessians plus the dynamics curvature weighted by the
    /// adjoint states, which carry the state-constraint multipliers `nu`.
    fn linearize(
        &self,
        us: &DVector<f64>,
        ev: &Evaluation,
        nu: &[DVector<f64>],
        curvature: bool,
    ) -> Linearization {
        let n = self.x0.len();
        let m = self.m;
        let nu_len = self.horizon * m;
        let bench = self.bench;
        let models: Vec<StageModel> = (0..self.horizon)
            .map(|h| {
                bench.objective.stage_model(
                    self.step + h,
                    &ev.states[h],
                    &self.input(us, h),
                    &self.params.objective,
                )
            })
            .collect();
        let gjacs: Vec<DMatrix<f64>> = ev
            .states
            .iter()
            .map(|x| bench.constraints.state.jacobian(x))
            .collect();

        // Curvature of transition h, weighted by the adjoint of x_{h+1}.
        let mut second: Vec<Option<DMatrix<f64>>> = vec![None; self.horizon];
        if curvature && self.horizon > 1 {
            let mut adjoint = DVector::<f64>::zeros(n);
            for h in (1..self.horizon).rev() {
                let mut lam = models[h].grad_x.clone();
                if let Some(v) = nu.get(h) {
                    if v.len() == gjacs[h].nrows() {
                        lam += gjacs[h].tr_mul(v);
                    }
                }
                if h + 1 < self.horizon {
                    lam += ev.jac_x[h].tr_mul(&adjoint);
                }
                adjoint = lam;
                if adjoint.iter().any(|v| *v != 0.0) {
                    second[h - 1] = bench
                        .system
                        .curvature(&ev.states[h - 1], &self.input(us, h - 1), &self.params.dynamics, &adjoint)
                        .ok();
                }
            }
        }

        let mut grad = DVector::zeros(nu_len);
        let mut hess = DMatrix::zeros(nu_len, nu_len);
        let mut rows = Vec::with_capacity(self.horizon);
        // dx_h / dU, nonzero only in the first h*m columns.
        let mut sens = DMatrix::<f64>::zeros(n, nu_len);
        for h in 0..self.horizon {
            let x = &ev.states[h];
            let model = &models[h];
            let cols = (h + 1) * m;
            let flat = model.is_flat() && second[h].is_none();
            if !flat {
                // W = [dx_h/dU; du_h/dU] restricted to the first `cols` columns.
                let mut w = DMatrix::zeros(n + m, cols);
                w.view_mut((0, 0), (n, cols))
                    .copy_from(&sens.columns(0, cols));
                for j in 0..m {
                    w[(n + j, h * m + j)] = 1.0;
                }
                let mut g_stage = DVector::zeros(n + m);
                g_stage.rows_mut(0, n).copy_from(&model.grad_x);
                g_stage.rows_mut(n, m).copy_from(&model.grad_u);
                let mut hs = DMatrix::zeros(n + m, n + m);
                hs.view_mut((0, 0), (n, n)).copy_from(&model.hess_xx);
                hs.view_mut((0, n), (n, m)).copy_from(&model.hess_xu);
                hs.view_mut((n, 0), (m, n))
                    .copy_from(&model.hess_xu.transpose());
                hs.view_mut((n, n), (m, m)).copy_from(&model.hess_uu);
                if let Some(c) = &second[h] {
                    hs += c;
                }
                let gw = w.tr_mul(&g_stage);
                grad.rows_mut(0, cols).axpy(1.0, &gw, 1.0);
                let hw = &hs * &w;
                let block = w.tr_mul(&hw);
                let mut view = hess.view_mut((0, 0), (cols, cols));
                view += block;
            }
            let gvals = bench.constraints.constraint_values(x);
            rows.push((gvals, &gjacs[h] * &sens));
            if h + 1 < self.horizon {
                let used = h * m;
                if used > 0 {
                    let prop = &ev.jac_x[h] * sens.columns(0, used);
                    sens.columns_mut(0, used).copy_from(&prop);
                }
                sens.columns_mut(h * m, m).copy_from(&ev.jac_u[h]);
            }
        }
        if curvature {
            convexify(&mut hess);
        }
        Linearization { grad, hess, rows }
    }
}

/// Replaces an indefinite symmetric matrix by its positive-semidefinite part.
fn convexify(hess: &mut DMatrix<f64>) {
    let n = hess.nrows();
    let scale = 1.0 + hess.diagonal().amax();
    let mut shifted = hess.clone();
    for i in 0..n {
        shifted[(i, i)] += 1e-12 * scale;
    }
    if shifted.cholesky().is_some() {
        return;
    }
    let t = hess.transpose();
    let sym = (&*hess + t) * 0.5;
    let eig = sym.symmetric_eigen();
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    *hess = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
}

struct Subproblem {
    g: DMatrix<f64>,
    a: DVector<f64>,
    constraints: Vec<Constraint>,
    /// `(step, row)` of each state-constraint entry.
    state_rows: Vec<Option<(usize, usize)>>,
}

impl Subproblem {
    /// Multipliers of the state constraints, one vector per predicted step.
    fn state_multipliers(&self, multipliers: &[f64], counts: usize, horizon: usize) -> Vec<DVector<f64>> {
        let mut nu = vec![DVector::zeros(counts); horizon];
        for (idx, &mu) in self.state_rows.iter().zip(multipliers) {
            if let Some((h, r)) = idx {
                nu[*h][*r] = mu;
            }
        }
        nu
    }
}

/// Builds the QP in `(dU, e)` where `e` are the new slack values.
fn build_subproblem(
    lin: &Linearization,
    us: &DVector<f64>,
    slacks: &[f64],
    bench: &Benchmark,
    m: usize,
    lambda: f64,
    offsets: &[DVector<f64>],
) -> Subproblem {
    let nu = us.len();
    let horizon = slacks.len();
    let nz = nu + horizon;
    let c1 = bench.constraints.linear_weight;
    let c2 = bench.constraints.quadratic_weight;
    let mut g = DMatrix::zeros(nz, nz);
    g.view_mut((0, 0), (nu, nu)).copy_from(&lin.hess);
    for i in 0..nu {
        g[(i, i)] += lambda;
    }
    let mut a = DVector::zeros(nz);
    a.rows_mut(0, nu).copy_from(&lin.grad);
    for (h, &eps) in slacks.iter().enumerate() {
        g[(nu + h, nu + h)] = 2.0 * c2 + lambda;
        a[nu + h] = c1 - lambda * eps;
    }

    let mut constraints = Vec::with_capacity(2 * nu + horizon * 6);
    let mut state_rows = Vec::with_capacity(2 * nu + horizon * 6);
    let lo = &bench.constraints.input_lower;
    let hi = &bench.constraints.input_upper;
    for i in 0..nu {
        let j = i % m;
        constraints.push(Constraint::Lower {
            var: i,
            bound: lo[j] - us[i],
        });
        constraints.push(Constraint::Upper {
            var: i,
            bound: hi[j] - us[i],
        });
        state_rows.extend([None, None]);
    }
    for (h, (gvals, gjac)) in lin.rows.iter().enumerate() {
        let var = nu + h;
        constraints.push(Constraint::Lower { var, bound: 0.0 });
        state_rows.push(None);
        for r in 0..gvals.len() {
            state_rows.push(Some((h, r)));
            if h == 0 {
                // The current state is fixed.
                constraints.push(Constraint::Lower {
                    var,
                    bound: gvals[r],
                });
                continue;
            }
            let mut normal = DVector::zeros(nz);
            normal.rows_mut(0, nu).copy_from(&(-gjac.row(r).transpose()));
            normal[var] = 1.0;
            let shift = offsets.get(h).map_or(0.0, |d| d[r]);
            constraints.push(Constraint::General {
                normal,
                rhs: gvals[r] + shift,
            });
        }
    }
    Subproblem {
        g,
        a,
        constraints,
        state_rows,
    }
}

/// Stationarity and complementarity of the NLP at the current point, using
/// the subproblem multipliers.
fn kkt_residual(
    lin: &Linearization,
    sub: &Subproblem,
    multipliers: &[f64],
    slacks: &[f64],
    bench: &Benchmark,
) -> f64 {
    let nu = lin.grad.len();
    let c1 = bench.constraints.linear_weight;
    let c2 = bench.constraints.quadratic_weight;
    let mut r = DVector::zeros(nu + slacks.len());
    r.rows_mut(0, nu).copy_from(&lin.grad);
    for (h, &eps) in slacks.iter().enumerate() {
        r[nu + h] = c1 + 2.0 * c2 * eps;
    }
    // At dz = 0 the constraint slack equals its value at the current point,
    // with the current slacks substituted for e.
    let mut current = DVector::zeros(nu + slacks.len());
    current.rows_mut(nu, slacks.len()).copy_from(&DVector::from_column_slice(slacks));
    let mut comp: f64 = 0.0;
    for (c, &mu) in sub.constraints.iter().zip(multipliers) {
        if mu == 0.0 {
            continue;
        }
        match c {
            Constraint::Lower { var, .. } => r[*var] -= mu,
            Constraint::Upper { var, .. } => r[*var] += mu,
            Constraint::General { normal, .. } => r.axpy(-mu, normal, 1.0),
        }
        comp = comp.max((mu * c.slack(&current)).abs());
    }
    r.amax().max(comp)
}

/// Predicted merit after the step under the Gauss-Newton/linearized model.
fn model_merit(
    lin: &Linearization,
    dz: &DVector<f64>,
    current_cost: f64,
    bench: &Benchmark,
) -> f64 {
    let nu = lin.grad.len();
    let du = dz.rows(0, nu);
    let mut value = current_cost + lin.grad.dot(&du) + 0.5 * du.dot(&(&lin.hess * du));
    for (gvals, gjac) in &lin.rows {
        let lin_g = gvals + gjac * du;
        let eps = lin_g.iter().fold(0.0f64, |acc, &v| acc.max(v));
        value += bench.constraints.linear_weight * eps
            + bench.constraints.quadratic_weight * eps * eps;
    }
    value
}

pub fn solve(problem: &MpcProblem<'_>, cfg: &SolverConfig) -> Result<MpcSolution> {
    let bench = problem.benchmark;
    let n_total = bench.horizon();
    let k = problem.step;
    if k >= n_total {
        return Err(Error::contract(format!("step {k} outside 0..{n_total}")));
    }
    if problem.state.len() != bench.state_dim() {
        return Err(Error::contract("state dimension mismatch"));
    }
    if problem.state.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("state must be finite"));
    }
    bench.check_params(problem.params)?;
    let horizon = n_total - k;
    let m = bench.input_dim();
    if let Some(w) = problem.warm_start {
        if w.len() != horizon || w.iter().any(|u| u.len() != m) {
            return Err(Error::contract(format!(
                "warm start must hold {horizon} inputs of length {m}"
            )));
        }
    }
    let shooting = Shooting {
        bench,
        params: problem.params,
        step: k,
        x0: problem.state,
        horizon,
        m,
        finite_differences: cfg.finite_differences,
    };

    let clamp = |us: &mut DVector<f64>| {
        for (i, v) in us.iter_mut().enumerate() {
            let j = i % m;
            *v = v.clamp(
                bench.constraints.input_lower[j],
                bench.constraints.input_upper[j],
            );
        }
    };
    let cold = || {
        let mut us = DVector::zeros(horizon * m);
        clamp(&mut us);
        us
    };
    let mut us = match problem.warm_start {
        Some(w) => {
            let mut us = DVector::from_iterator(
                horizon * m,
                w.iter().flat_map(|u| u.iter().copied()),
            );
            clamp(&mut us);
            us
        }
        None => cold(),
    };
    let mut ev = match shooting.evaluate(&us) {
        Some(ev) => ev,
        None => {
            us = cold();
            shooting.evaluate(&us).ok_or_else(|| {
                Error::numerical("initial rollout is not finite or leaves the model domain", 0)
            })?
        }
    };

    let curvature = cfg.hessian == HessianModel::Exact;
    let n_g = bench.constraints.state.count();
    let mut state_mult: Vec<DVector<f64>> = Vec::new();
    let mut lambda = cfg.regularization;
    let mut lin = shooting.linearize(&us, &ev, &state_mult, curvature);
    let mut status = SolveStatus::MaxIterations;
    let mut kkt = f64::INFINITY;
    let mut trace = Vec::new();
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let sub = build_subproblem(&lin, &us, &ev.slacks, bench, m, lambda, &[]);
        let mut start = DVector::zeros(us.len() + horizon);
        start
            .rows_mut(us.len(), horizon)
            .copy_from(&DVector::from_column_slice(&ev.slacks));
        let qp = match solve_subproblem(&sub, start.clone()) {
            Ok(qp) => qp,
            Err(_) => {
                status = SolveStatus::InfeasibleSubproblem;
                break;
            }
        };
        if qp.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("subproblem produced a non-finite step", trace.len()));
        }
        kkt = kkt_residual(&lin, &sub, &qp.multipliers, &ev.slacks, bench);
        state_mult = sub.state_multipliers(&qp.multipliers, n_g, horizon);
        if kkt <= cfg.kkt_tolerance {
            trace.push(TraceRow {
                iteration: iterations,
                merit: ev.merit,
                kkt_residual: kkt,
                regularization: lambda,
                accepted: false,
            });
            status = SolveStatus::Converged;
            break;
        }
        let nu = us.len();
        let predicted = ev.merit - model_merit(&lin, &qp.x, ev.merit - penalty_of(bench, &ev.slacks), bench);
        let mut trial = &us + qp.x.rows(0, nu);
        clamp(&mut trial);
        let mut trial_ev = shooting.evaluate(&trial);
        // Below this scale reductions are rounding noise.
        let noise = 1e-13 * (1.0 + ev.merit.abs());
        if let Some(t) = &trial_ev {
            if predicted > noise && (ev.merit - t.merit) / predicted < 0.25 {
                // Second-order correction: shift each linearized state
                // constraint by its error at the trial point.
                let du = qp.x.rows(0, nu);
                let offsets: Vec<DVector<f64>> = lin
                    .rows
                    .iter()
                    .zip(&t.states)
                    .map(|((gvals, gjac), x)| {
                        bench.constraints.constraint_values(x) - gvals - gjac * du
                    })
                    .collect();
                let soc = build_subproblem(&lin, &us, &ev.slacks, bench, m, lambda, &offsets);
                let mut start2 = start.clone();
                for (h, ((gvals, _), d)) in lin.rows.iter().zip(&offsets).enumerate().skip(1) {
                    let need = (gvals + d).iter().fold(0.0f64, |acc, &v| acc.max(v));
                    start2[nu + h] = start2[nu + h].max(need);
                }
                if let Ok(qp2) = solve_subproblem(&soc, start2) {
                    let mut second = &us + qp2.x.rows(0, nu);
                    clamp(&mut second);
                    if let Some(t2) = shooting.evaluate(&second) {
                        if t2.merit < t.merit {
                            trial = second;
                            trial_ev = Some(t2);
                        }
                    }
                }
            }
        }
        let accepted = match (&trial_ev, predicted > noise) {
            (Some(t), false) => t.merit <= ev.merit + noise,
            (Some(t), true) => {
                let actual = ev.merit - t.merit;
                let ratio = actual / predicted;
                if ratio > cfg.acceptance_ratio {
                    if ratio > 0.75 {
                        lambda = (lambda / 3.0).max(cfg.min_regularization);
                    } else if ratio < 0.25 {
                        lambda = (lambda * 2.0).min(cfg.max_regularization);
                    }
                    true
                } else {
                    false
                }
            }
            _ => false,
        };
        trace.push(TraceRow {
            iteration: iterations,
            merit: ev.merit,
            kkt_residual: kkt,
            regularization: lambda,
            accepted,
        });
        if accepted {
            let t = trial_ev.unwrap();
            us = trial;
            ev = t;
            lin = shooting.linearize(&us, &ev, &state_mult, curvature);
        } else {
            if predicted <= 0.0 && lambda >= cfg.max_regularization {
                break;
            }
            lambda = (lambda * 4.0).min(cfg.max_regularization);
        }
        if !ev.merit.is_finite() {
            return Err(Error::numerical("merit became non-finite", trace.len()));
        }
    }

    let inputs = (0..horizon).map(|h| shooting.input(&us, h)).collect();
    Ok(MpcSolution {
        inputs,
        states: ev.states,
        slacks: ev.slacks,
        objective: ev.merit,
        status,
        iterations,
        kkt_residual: kkt,
        trace,
    })
}

/// `dU = 0` with the current slacks is feasible; its active set seeds the
/// primal method, with the dual method as fallback.
fn solve_subproblem(sub: &Subproblem, start: DVector<f64>) -> std::result::Result<qp::QpSolution, qp::QpFailure> {
    let all: Vec<usize> = (0..sub.constraints.len()).collect();
    qp::solve_primal(&sub.g, &sub.a, &sub.constraints, start, &all)
        .or_else(|_| qp::solve(&sub.g, &sub.a, &sub.constraints))
}

fn penalty_of(bench: &Benchmark, slacks: &[f64]) -> f64 {
    slacks
        .iter()
        .map(|&e| bench.constraints.linear_weight * e + bench.constraints.quadratic_weight * e * e)
        .sum()
}

/// The MPC policy: first input of the optimal sequence, plus the full
/// solution for warm-starting the next step.
pub fn policy(
    benchmark: &Benchmark,
    params: &ParamVector,
    step: usize,
    state: &DVector<f64>,
    warm_start: Option<&[DVector<f64>]>,
    cfg: &SolverConfig,
) -> Result<(DVector<f64>, MpcSolution)> {
    let sol = solve(
        &MpcProblem {
            benchmark,
            params,
            step,
            state,
            warm_start,
        },
        cfg,
    )?;
    Ok((sol.inputs[0].clone(), sol))
}
