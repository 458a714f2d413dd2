//! Finite-horizon discrete-time Riccati recursion.
//!
//! Reference solution for unconstrained linear-quadratic instances of the
//! shrinking-horizon problem: stage cost `x^T Q x + u^T R u` at steps
//! `0..N`, no cost on `x(N)`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    /// Feedback gains `K_0..K_{N-1}` with `u = -K_k x`.
    pub gains: Vec<DMatrix<f64>>,
    /// Value matrices `P_0..P_N`, `P_N = 0`.
    pub values: Vec<DMatrix<f64>>,
}

impl RiccatiSolution {
    /// Expected cost-to-go from `(k, x)` under additive noise `Sigma_w`.
    pub fn expected_value(&self, k: usize, x: &nalgebra::DVector<f64>, noise: &DMatrix<f64>) -> f64 {
        let horizon = self.gains.len();
        let quad = x.dot(&(&self.values[k] * x));
        let trace: f64 = (k + 1..=horizon)
            .map(|j| (&self.values[j] * noise).trace())
            .sum();
        quad + trace
    }
}

pub fn finite_horizon(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    horizon: usize,
) -> Result<RiccatiSolution> {
    let n = a.nrows();
    let mut values = vec![DMatrix::zeros(n, n); horizon + 1];
    let mut gains = vec![DMatrix::zeros(b.ncols(), n); horizon];
    for k in (0..horizon).rev() {
        let p = &values[k + 1];
        let s = r + b.transpose() * p * b;
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::numerical("R + B^T P B is not positive definite", k))?;
        let gain = chol.solve(&(b.transpose() * p * a));
        let closed = a - b * &gain;
        let next = q + a.transpose() * p * &closed;
        values[k] = (&next + next.transpose()) * 0.5;
        gains[k] = gain;
    }
    Ok(RiccatiSolution { gains, values })
}
