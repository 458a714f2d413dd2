//! Dense strictly convex QP solvers.
//!
//! Both solve `min 1/2 x^T G x + a^T x` subject to `n_i^T x >= b_i`. Simple
//! bounds are stored as variable indices so their products cost O(1).
//! [`solve`] is the Goldfarb-Idnani dual method and needs no starting point.
//! [`solve_primal`] is a primal active-set method that starts from a feasible
//! point and works in the subspace of variables not fixed by bounds; it is
//! much cheaper when most variables sit on bounds and a good working set is
//! known.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub(crate) enum Constraint {
    /// `x[var] >= bound`
    Lower { var: usize, bound: f64 },
    /// `x[var] <= bound`
    Upper { var: usize, bound: f64 },
    /// `normal^T x >= rhs`
    General { normal: DVector<f64>, rhs: f64 },
}

impl Constraint {
    /// `n^T x - b`, nonnegative when satisfied.
    pub(crate) fn slack(&self, x: &DVector<f64>) -> f64 {
        match self {
            Constraint::Lower { var, bound } => x[*var] - bound,
            Constraint::Upper { var, bound } => bound - x[*var],
            Constraint::General { normal, rhs } => normal.dot(x) - rhs,
        }
    }

    fn rhs_scale(&self) -> f64 {
        match self {
            Constraint::Lower { bound, .. } | Constraint::Upper { bound, .. } => bound.abs(),
            Constraint::General { rhs, .. } => rhs.abs(),
        }
    }

    fn var(&self) -> Option<usize> {
        match self {
            Constraint::Lower { var, .. } | Constraint::Upper { var, .. } => Some(*var),
            Constraint::General { .. } => None,
        }
    }

    fn dot(&self, v: &DVector<f64>) -> f64 {
        match self {
            Constraint::Lower { var, .. } => v[*var],
            Constraint::Upper { var, .. } => -v[*var],
            Constraint::General { normal, .. } => normal.dot(v),
        }
    }

    /// `J^T n`
    fn project(&self, j: &DMatrix<f64>) -> DVector<f64> {
        match self {
            Constraint::Lower { var, .. } => j.row(*var).transpose(),
            Constraint::Upper { var, .. } => -j.row(*var).transpose(),
            Constraint::General { normal, .. } => j.tr_mul(normal),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum QpFailure {
    NotPositiveDefinite,
    Infeasible,
    /// The working set became numerically dependent or the iteration cap was hit.
    Stalled,
}

#[derive(Debug, Clone)]
pub(crate) struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per constraint, zero when inactive.
    pub multipliers: Vec<f64>,
}

fn rotate_columns(j: &mut DMatrix<f64>, a: usize, b: usize, c: f64, s: f64) {
    for row in 0..j.nrows() {
        let x = j[(row, a)];
        let y = j[(row, b)];
        j[(row, a)] = c * x + s * y;
        j[(row, b)] = -s * x + c * y;
    }
}

struct ActiveSet {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    indices: Vec<usize>,
}

impl ActiveSet {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn add(&mut self, index: usize, mut d: DVector<f64>) {
        let q = self.len();
        let n = d.len();
        for k in (q + 1..n).rev() {
            let (a, b) = (d[k - 1], d[k]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            d[k - 1] = h;
            d[k] = 0.0;
            rotate_columns(&mut self.j, k - 1, k, c, s);
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
        self.indices.push(index);
    }

    fn drop(&mut self, pos: usize) {
        let q = self.len();
        for col in pos..q - 1 {
            for row in 0..q {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..q {
            self.r[(row, q - 1)] = 0.0;
        }
        self.indices.remove(pos);
        for k in pos..q - 1 {
            let (a, b) = (self.r[(k, k)], self.r[(k + 1, k)]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for col in k..q - 1 {
                let x = self.r[(k, col)];
                let y = self.r[(k + 1, col)];
                self.r[(k, col)] = c * x + s * y;
                self.r[(k + 1, col)] = -s * x + c * y;
            }
            self.r[(k + 1, k)] = 0.0;
            rotate_columns(&mut self.j, k, k + 1, c, s);
        }
    }

    /// Solves `R r = d[..q]` by back substitution.
    fn dual_direction(&self, d: &DVector<f64>) -> Vec<f64> {
        let q = self.len();
        let mut r = vec![0.0; q];
        for i in (0..q).rev() {
            let s: f64 = (i + 1..q).map(|k| self.r[(i, k)] * r[k]).sum();
            r[i] = (d[i] - s) / self.r[(i, i)];
        }
        r
    }

    fn primal_direction(&self, d: &DVector<f64>) -> DVector<f64> {
        let q = self.len();
        let mut z = DVector::zeros(self.j.nrows());
        for k in q..d.len() {
            if d[k] != 0.0 {
                z.axpy(d[k], &self.j.column(k), 1.0);
            }
        }
        z
    }
}

pub(crate) fn solve(
    g: &DMatrix<f64>,
    a: &DVector<f64>,
    constraints: &[Constraint],
) -> Result<QpSolution, QpFailure> {
    let n = a.len();
    let chol = g
        .clone()
        .cholesky()
        .ok_or(QpFailure::NotPositiveDefinite)?;
    let lt = chol.l().transpose();
    let j = lt
        .solve_upper_triangular(&DMatrix::identity(n, n))
        .ok_or(QpFailure::NotPositiveDefinite)?;
    let mut x = -chol.solve(a);
    let mut set = ActiveSet {
        j,
        r: DMatrix::zeros(n, n),
        indices: Vec::with_capacity(n),
    };
    let mut u: Vec<f64> = Vec::with_capacity(n + 1);
    let mut is_active = vec![false; constraints.len()];
    let max_iterations = 10 * (n + constraints.len()) + 100;
    let mut iterations = 0;

    loop {
        // Most violated inactive constraint.
        let mut chosen = None;
        let mut worst = 0.0;
        for (i, c) in constraints.iter().enumerate() {
            if is_active[i] {
                continue;
            }
            let s = c.slack(&x);
            let tol = 1e-11 * (1.0 + c.rhs_scale());
            if s < -tol && s < worst {
                worst = s;
                chosen = Some(i);
            }
        }
        let Some(p) = chosen else {
            break;
        };
        let cp = &constraints[p];
        u.push(0.0);

        loop {
            iterations += 1;
            if iterations > max_iterations {
                return Err(QpFailure::Infeasible);
            }
            let q = set.len();
            let d = cp.project(&set.j);
            let z = set.primal_direction(&d);
            let r = set.dual_direction(&d);

            let mut t1 = f64::INFINITY;
            let mut drop_pos = usize::MAX;
            for (k, &rk) in r.iter().enumerate() {
                if rk > 0.0 {
                    let ratio = u[k] / rk;
                    if ratio < t1 {
                        t1 = ratio;
                        drop_pos = k;
                    }
                }
            }
            let d_sq: f64 = d.norm_squared();
            let tail_sq: f64 = d.rows(q, n - q).norm_squared();
            let t2 = if tail_sq > 1e-24 * d_sq.max(f64::MIN_POSITIVE) {
                -cp.slack(&x) / cp.dot(&z)
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpFailure::Infeasible);
            }

            if t2.is_finite() {
                x.axpy(t, &z, 1.0);
            }
            for k in 0..q {
                u[k] -= t * r[k];
            }
            u[q] += t;

            if t2.is_finite() && t2 <= t1 {
                set.add(p, d);
                is_active[p] = true;
                break;
            }
            is_active[set.indices[drop_pos]] = false;
            set.drop(drop_pos);
            u.remove(drop_pos);
        }
    }

    let mut multipliers = vec![0.0; constraints.len()];
    for (k, &idx) in set.indices.iter().enumerate() {
        multipliers[idx] = u[k];
    }
    Ok(QpSolution { x, multipliers })
}

/// Primal active-set method from a feasible `x0`.
///
/// `working` lists constraints active at `x0` to start from; entries that
/// are inactive, or that fix an already fixed variable, are skipped.
pub(crate) fn solve_primal(
    g: &DMatrix<f64>,
    a: &DVector<f64>,
    constraints: &[Constraint],
    x0: DVector<f64>,
    working: &[usize],
) -> Result<QpSolution, QpFailure> {
    let n = a.len();
    let mut x = x0;
    let scale = 1.0 + x.amax();
    let feas_tol = 1e-10 * scale;
    let zero_step = 1e-13 * scale;

    // General rows stacked so products with them are single gemv calls.
    let rows: Vec<usize> = (0..constraints.len())
        .filter(|&i| constraints[i].var().is_none())
        .collect();
    let mut normals = DMatrix::zeros(rows.len(), n);
    let mut rhs = DVector::zeros(rows.len());
    let mut row_of = vec![usize::MAX; constraints.len()];
    for (r, &i) in rows.iter().enumerate() {
        if let Constraint::General { normal, rhs: b } = &constraints[i] {
            normals.set_row(r, &normal.transpose());
            rhs[r] = *b;
        }
        row_of[i] = r;
    }
    let mut residual = &normals * &x - &rhs;
    let slack = |i: usize, x: &DVector<f64>, residual: &DVector<f64>| match constraints[i] {
        Constraint::General { .. } => residual[row_of[i]],
        _ => constraints[i].slack(x),
    };
    if (0..constraints.len()).any(|i| slack(i, &x, &residual) < -feas_tol) {
        return Err(QpFailure::Infeasible);
    }

    let mut fixed: Vec<Option<usize>> = vec![None; n];
    let mut general: Vec<usize> = Vec::new();
    let mut in_set = vec![false; constraints.len()];
    for &i in working {
        if in_set[i] || slack(i, &x, &residual).abs() > feas_tol {
            continue;
        }
        match constraints[i].var() {
            Some(v) if fixed[v].is_none() => {
                fixed[v] = Some(i);
                in_set[i] = true;
            }
            Some(_) => {}
            None => {
                general.push(i);
                in_set[i] = true;
            }
        }
    }

    let bound_multiplier = |i: usize, r: f64| match constraints[i] {
        Constraint::Lower { .. } => r,
        _ => -r,
    };
    let max_iterations = 5 * (n + constraints.len()) + 50;
    let mut grad = g * &x + a;
    let mut at_minimizer = false;
    for _ in 0..max_iterations {
        let free: Vec<usize> = (0..n).filter(|&v| fixed[v].is_none()).collect();
        let nf = free.len();
        // Equality-constrained step on the free variables.
        let mut p = DVector::zeros(n);
        let mut mu_gen = DVector::zeros(general.len());
        if nf > 0 {
            let h = DMatrix::from_fn(nf, nf, |i, j| g[(free[i], free[j])]);
            let chol = h.cholesky().ok_or(QpFailure::NotPositiveDefinite)?;
            let gf = DVector::from_fn(nf, |i, _| grad[free[i]]);
            let hg = chol.solve(&gf);
            let mut pf = -&hg;
            if !general.is_empty() {
                let af = DMatrix::from_fn(general.len(), nf, |r, i| {
                    normals[(row_of[general[r]], free[i])]
                });
                let y = chol.solve(&af.transpose());
                let schur = (&af * &y).cholesky().ok_or(QpFailure::Stalled)?;
                // mu solves (A H^-1 A^T) mu = A H^-1 g
                mu_gen = schur.solve(&(&af * &hg));
                pf.gemv(1.0, &y, &mu_gen, 1.0);
            }
            for (i, &v) in free.iter().enumerate() {
                p[v] = pf[i];
            }
        } else if !general.is_empty() {
            return Err(QpFailure::Stalled);
        }

        // A full step lands on the working-set minimizer; further steps
        // would only chase rounding error.
        if at_minimizer || p.amax() <= zero_step {
            if at_minimizer && p.amax() > zero_step {
                x += &p;
                grad.gemv(1.0, g, &p, 1.0);
                residual.gemv(1.0, &normals, &p, 1.0);
            }
            at_minimizer = false;
            // Stationary on the working set: check multiplier signs.
            let mut r = grad.clone();
            for (k, &i) in general.iter().enumerate() {
                r.axpy(-mu_gen[k], &normals.row(row_of[i]).transpose(), 1.0);
            }
            let mut worst: Option<(f64, usize)> = None;
            let mut consider = |mu: f64, i: usize| {
                if worst.is_none_or(|(w, _)| mu < w) {
                    worst = Some((mu, i));
                }
            };
            for (k, &i) in general.iter().enumerate() {
                consider(mu_gen[k], i);
            }
            for (v, f) in fixed.iter().enumerate() {
                if let Some(i) = *f {
                    consider(bound_multiplier(i, r[v]), i);
                }
            }
            let tol = 1e-11 * (1.0 + grad.amax());
            match worst {
                Some((mu, i)) if mu < -tol => {
                    in_set[i] = false;
                    match constraints[i].var() {
                        Some(v) => fixed[v] = None,
                        None => general.retain(|&j| j != i),
                    }
                    continue;
                }
                _ => {
                    let mut multipliers = vec![0.0; constraints.len()];
                    for (k, &i) in general.iter().enumerate() {
                        multipliers[i] = mu_gen[k].max(0.0);
                    }
                    for (v, f) in fixed.iter().enumerate() {
                        if let Some(i) = *f {
                            multipliers[i] = bound_multiplier(i, r[v]).max(0.0);
                        }
                    }
                    return Ok(QpSolution { x, multipliers });
                }
            }
        }

        // Ratio test over constraints outside the working set.
        let np = &normals * &p;
        let mut alpha = 1.0;
        let mut blocking = None;
        for (i, c) in constraints.iter().enumerate() {
            if in_set[i] {
                continue;
            }
            let d = match c {
                Constraint::General { .. } => np[row_of[i]],
                _ => c.dot(&p),
            };
            if d < -1e-14 * scale {
                let step = slack(i, &x, &residual).max(0.0) / -d;
                if step < alpha {
                    alpha = step;
                    blocking = Some(i);
                }
            }
        }
        let Some(i) = blocking else {
            // Take the step together with the multiplier check.
            at_minimizer = true;
            continue;
        };
        x.axpy(alpha, &p, 1.0);
        residual.axpy(alpha, &np, 1.0);
        match constraints[i].var() {
            Some(v) => {
                if fixed[v].is_some() {
                    return Err(QpFailure::Stalled);
                }
                fixed[v] = Some(i);
                // Remove rounding drift off the bound.
                if let Constraint::Lower { bound, .. } | Constraint::Upper { bound, .. } =
                    constraints[i]
                {
                    let drift = bound - x[v];
                    x[v] = bound;
                    residual.axpy(drift, &normals.column(v), 1.0);
                    grad.axpy(drift, &g.column(v), 1.0);
                }
            }
            None => general.push(i),
        }
        grad.gemv(alpha, g, &p, 1.0);
        in_set[i] = true;
    }
    Err(QpFailure::Stalled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unconstrained_minimum() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let a = DVector::from_vec(vec![-2.0, -4.0]);
        let sol = solve(&g, &a, &[]).unwrap();
        assert!((sol.x - DVector::from_vec(vec![1.0, 1.0])).norm() < 1e-14);
    }

    #[test]
    fn active_bound() {
        // min (x-2)^2 + (y-1)^2, x <= 1
        let g = DMatrix::identity(2, 2) * 2.0;
        let a = DVector::from_vec(vec![-4.0, -2.0]);
        let cons = [Constraint::Upper { var: 0, bound: 1.0 }];
        let sol = solve(&g, &a, &cons).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-14);
        assert!((sol.x[1] - 1.0).abs() < 1e-14);
        assert!((sol.multipliers[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn general_constraint() {
        // min x^2 + y^2 s.t. x + y >= 2  ->  (1, 1), multiplier 2
        let g = DMatrix::identity(2, 2) * 2.0;
        let a = DVector::zeros(2);
        let cons = [Constraint::General {
            normal: DVector::from_vec(vec![1.0, 1.0]),
            rhs: 2.0,
        }];
        let sol = solve(&g, &a, &cons).unwrap();
        assert!((sol.x - DVector::from_vec(vec![1.0, 1.0])).norm() < 1e-13);
        assert!((sol.multipliers[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let g = DMatrix::identity(1, 1);
        let a = DVector::zeros(1);
        let cons = [
            Constraint::Lower { var: 0, bound: 1.0 },
            Constraint::Upper { var: 0, bound: 0.0 },
        ];
        assert_eq!(solve(&g, &a, &cons).unwrap_err(), QpFailure::Infeasible);
    }

    #[test]
    fn primal_matches_dual_on_bound_problem() {
        let g = DMatrix::identity(2, 2) * 2.0;
        let a = DVector::from_vec(vec![-4.0, -2.0]);
        let cons = [
            Constraint::Upper { var: 0, bound: 1.0 },
            Constraint::General {
                normal: DVector::from_vec(vec![-1.0, -1.0]),
                rhs: -1.5,
            },
        ];
        let dual = solve(&g, &a, &cons).unwrap();
        let primal = solve_primal(&g, &a, &cons, DVector::zeros(2), &[]).unwrap();
        assert!((dual.x - &primal.x).amax() < 1e-12);
        for (d, p) in dual.multipliers.iter().zip(&primal.multipliers) {
            assert!((d - p).abs() < 1e-10);
        }
    }

    #[test]
    fn primal_rejects_infeasible_start() {
        let g = DMatrix::identity(1, 1);
        let cons = [Constraint::Lower { var: 0, bound: 1.0 }];
        assert_eq!(
            solve_primal(&g, &DVector::zeros(1), &cons, DVector::zeros(1), &[]).unwrap_err(),
            QpFailure::Infeasible
        );
    }

    // Brute-force check of KKT conditions on random box + halfspace problems.
    proptest! {
        #[test]
        fn satisfies_kkt(
            seed in proptest::collection::vec(-1.0..1.0f64, 40),
        ) {
            let n = 4;
            let m = DMatrix::from_fn(n, n, |i, j| seed[i * n + j]);
            let g = &m * m.transpose() + DMatrix::identity(n, n) * 0.5;
            let a = DVector::from_fn(n, |i, _| 3.0 * seed[16 + i]);
            let mut cons = Vec::new();
            for i in 0..n {
                cons.push(Constraint::Lower { var: i, bound: -0.5 });
                cons.push(Constraint::Upper { var: i, bound: 0.5 });
            }
            for k in 0..3 {
                cons.push(Constraint::General {
                    normal: DVector::from_fn(n, |i, _| seed[20 + 4 * k + i]),
                    rhs: -0.3 + 0.2 * seed[32 + k],
                });
            }
            let sol = solve(&g, &a, &cons).unwrap();
            let mut grad = &g * &sol.x + &a;
            for (c, &mu) in cons.iter().zip(&sol.multipliers) {
                prop_assert!(mu >= -1e-10);
                prop_assert!(c.slack(&sol.x) >= -1e-9);
                prop_assert!((mu * c.slack(&sol.x)).abs() < 1e-8);
                let mut e = DVector::zeros(n);
                for i in 0..n {
                    let mut unit = DVector::zeros(n);
                    unit[i] = 1.0;
                    e[i] = c.dot(&unit);
                }
                grad -= e * mu;
            }
            prop_assert!(grad.amax() < 1e-8, "stationarity {}", grad.amax());
            // rhs <= -0.1 and the box contains 0, so the origin is feasible.
            let primal = solve_primal(&g, &a, &cons, DVector::zeros(n), &[]).unwrap();
            prop_assert!((&primal.x - &sol.x).amax() < 1e-8);
        }
    }
}
