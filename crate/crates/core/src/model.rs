//! Parametric discrete-time stochastic systems.
//!
//! Every system has the form `x+ = known(x, u) + correction(x, u; theta_f) + w`
//! where the correction is linear in the parameters: each parameterized state
//! channel `i` adds `theta_i^T phi_i(x, u)` to its known update. The feature
//! rows returned by [`Dynamics::feature_matrix`] are the single source for both
//! simulation and regression.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{correlated_normal, psd_sqrt, SimRng};

/// One parameterized state channel: which state it corrects and how many
/// features feed it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub state_index: usize,
    pub feature_count: usize,
}

/// Dimensions, timing and process noise of a system.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    state_names: Vec<String>,
    input_names: Vec<String>,
    channels: Vec<Channel>,
    horizon: usize,
    sampling_time: f64,
    noise_cov: DMatrix<f64>,
    noise_factor: DMatrix<f64>,
}

impl SystemSpec {
    pub fn new(
        state_names: Vec<String>,
        input_names: Vec<String>,
        channels: Vec<Channel>,
        horizon: usize,
        sampling_time: f64,
        noise_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let n = state_names.len();
        if n == 0 || input_names.is_empty() {
            return Err(Error::contract("state and input dimensions must be >= 1"));
        }
        if channels.is_empty() || channels.iter().any(|c| c.feature_count == 0) {
            return Err(Error::contract("at least one channel with >= 1 feature is required"));
        }
        if let Some(c) = channels.iter().find(|c| c.state_index >= n) {
            return Err(Error::contract(format!(
                "channel `{}` targets state {} but n = {n}",
                c.name, c.state_index
            )));
        }
        if horizon == 0 {
            return Err(Error::contract("horizon N must be >= 1"));
        }
        if !(sampling_time > 0.0 && sampling_time.is_finite()) {
            return Err(Error::contract("sampling time must be positive"));
        }
        if noise_cov.shape() != (n, n) {
            return Err(Error::contract(format!(
                "noise covariance is {:?}, expected {n}x{n}",
                noise_cov.shape()
            )));
        }
        if (&noise_cov - noise_cov.transpose()).amax() > 1e-12 * (1.0 + noise_cov.amax()) {
            return Err(Error::contract("noise covariance must be symmetric"));
        }
        let min_eig = noise_cov.clone().symmetric_eigenvalues().min();
        if min_eig < -1e-12 {
            return Err(Error::contract(format!(
                "noise covariance has negative eigenvalue {min_eig}"
            )));
        }
        let noise_factor = psd_sqrt(&noise_cov);
        Ok(Self {
            state_names,
            input_names,
            channels,
            horizon,
            sampling_time,
            noise_cov,
            noise_factor,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_names.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_names.len()
    }

    /// Total dynamics feature count over all channels.
    pub fn feature_count(&self) -> usize {
        self.channels.iter().map(|c| c.feature_count).sum()
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn state_names(&self) -> &[String] {
        &self.state_names
    }

    pub fn input_names(&self) -> &[String] {
        &self.input_names
    }

    /// Steps per episode.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn sampling_time(&self) -> f64 {
        self.sampling_time
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    /// Draws one process-noise vector `w ~ N(0, Sigma_w)`.
    pub fn sample_noise(&self, rng: &mut SimRng) -> DVector<f64> {
        correlated_normal(rng, &self.noise_factor)
    }

    pub(crate) fn check_dims(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if x.len() != self.state_dim() || u.len() != self.input_dim() {
            return Err(Error::contract(format!(
                "state/input length ({}, {}) does not match system ({}, {})",
                x.len(),
                u.len(),
                self.state_dim(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_params(&self, theta: &DynamicsParams) -> Result<()> {
        if theta.0.len() != self.channels.len()
            || theta
                .0
                .iter()
                .zip(&self.channels)
                .any(|(t, c)| t.len() != c.feature_count)
        {
            return Err(Error::contract(
                "dynamics parameter blocks do not match channel feature counts",
            ));
        }
        Ok(())
    }
}

/// Dynamics parameters, one coefficient vector per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams(pub Vec<DVector<f64>>);

impl DynamicsParams {
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Concatenated objective and dynamics parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub objective: DVector<f64>,
    pub dynamics: DynamicsParams,
}

impl ParamVector {
    pub fn is_finite(&self) -> bool {
        self.objective.iter().all(|v| v.is_finite()) && self.dynamics.is_finite()
    }
}

/// A parametric transition map with feature-linear unknown part.
pub trait Dynamics: Send + Sync + std::fmt::Debug {
    fn spec(&self) -> &SystemSpec;

    /// Transition with all parameterized corrections removed.
    fn known_part(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// Regressor rows, one per channel.
    fn feature_matrix(&self, x: &DVector<f64>, u: &DVector<f64>) -> Vec<DVector<f64>>;

    /// Analytic `(df/dx, df/du)` of the nominal transition.
    fn jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DynamicsParams,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)>;

    /// Draws an initial condition `x(0)`.
    fn sample_initial_state(&self, rng: &mut SimRng) -> DVector<f64>;

    /// Weighted curvature `sum_i w_i * d2 f_i / dz2` with `z = (x, u)`.
    ///
    /// The default differentiates the Jacobians numerically.
    fn curvature(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DynamicsParams,
        weights: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        let n = x.len();
        let m = u.len();
        let h = 1e-6;
        let weighted = |x: &DVector<f64>, u: &DVector<f64>| -> Result<DVector<f64>> {
            let (a, b) = self.jacobians(x, u, theta)?;
            let mut g = DVector::zeros(n + m);
            g.rows_mut(0, n).copy_from(&a.tr_mul(weights));
            g.rows_mut(n, m).copy_from(&b.tr_mul(weights));
            Ok(g)
        };
        let mut out = DMatrix::zeros(n + m, n + m);
        for j in 0..n + m {
            let (mut xp, mut xm, mut up, mut um) = (x.clone(), x.clone(), u.clone(), u.clone());
            if j < n {
                xp[j] += h;
                xm[j] -= h;
            } else {
                up[j - n] += h;
                um[j - n] -= h;
            }
            let col = (weighted(&xp, &up)? - weighted(&xm, &um)?) / (2.0 * h);
            out.set_column(j, &col);
        }
        let t = out.transpose();
        Ok((out + t) * 0.5)
    }

    fn step_nominal(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DynamicsParams,
    ) -> Result<DVector<f64>> {
        let spec = self.spec();
        spec.check_dims(x, u)?;
        spec.check_params(theta)?;
        let mut next = self.known_part(x, u);
        for ((channel, phi), coeffs) in spec
            .channels()
            .iter()
            .zip(self.feature_matrix(x, u))
            .zip(&theta.0)
        {
            next[channel.state_index] += coeffs.dot(&phi);
        }
        Ok(next)
    }

    fn step_noisy(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DynamicsParams,
        rng: &mut SimRng,
    ) -> Result<DVector<f64>> {
        let next = self.step_nominal(x, u, theta)?;
        Ok(next + self.spec().sample_noise(rng))
    }
}

/// Geometry constants of the car-trailer combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrailerGeometry {
    /// Car wheelbase `a` in the heading update.
    pub wheelbase: f64,
    /// Distance from the car reference point back to the hitch.
    pub hitch_offset: f64,
    /// Nominal hitch-to-trailer-axle length.
    pub trailer_length: f64,
}

impl Default for TrailerGeometry {
    fn default() -> Self {
        Self {
            wheelbase: 1.0,
            hitch_offset: 1.0,
            trailer_length: 2.0,
        }
    }
}

/// Uniform initial-condition box for the car-trailer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrailerInitialRange {
    pub x_c: [f64; 2],
    pub y_c: [f64; 2],
    pub heading: [f64; 2],
    pub steering: [f64; 2],
    pub speed: [f64; 2],
    /// Rejection bound on `|kappa - phi|`.
    pub max_articulation: f64,
}

impl Default for TrailerInitialRange {
    fn default() -> Self {
        Self {
            x_c: [4.0, 8.0],
            y_c: [-2.0, 2.0],
            heading: [-0.3, 0.3],
            steering: [-0.2, 0.2],
            speed: [-0.2, 0.2],
            max_articulation: 0.5,
        }
    }
}

fn uniform(rng: &mut SimRng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// State indices of the car-trailer system.
pub mod trailer_index {
    pub const Y_C: usize = 0;
    pub const PHI: usize = 1;
    pub const DELTA: usize = 2;
    pub const KAPPA: usize = 3;
    pub const X_C: usize = 4;
    pub const V_C: usize = 5;
    pub const OMEGA: usize = 0;
    pub const ACCEL: usize = 1;
}

/// Euler-discretized kinematic car with an off-axle hitched trailer.
///
/// States `[y_c, phi, delta, kappa, x_c, v_c]`, inputs `[omega_delta, a_c]`.
/// The steering update `delta+ = delta + theta_1 * omega_delta` and the trailer
/// update `kappa+ = kappa + theta_2^T [v sin(kappa-phi), v tan(delta) cos(kappa-phi)]`
/// carry the unknown parameters.
#[derive(Debug, Clone)]
pub struct CarTrailer {
    spec: SystemSpec,
    pub geometry: TrailerGeometry,
    pub initial: TrailerInitialRange,
}

impl CarTrailer {
    pub const STATE_NAMES: [&'static str; 6] = ["y_c", "phi", "delta", "kappa", "x_c", "v_c"];
    pub const INPUT_NAMES: [&'static str; 2] = ["omega_delta", "a_c"];

    /// Per-state process-noise variances divided by the sampling time, in state order.
    pub const NOISE_RATES: [f64; 6] = [0.03, 0.017, 0.1, 0.01, 0.01, 0.01];

    pub fn new(
        horizon: usize,
        sampling_time: f64,
        noise_cov: DMatrix<f64>,
        geometry: TrailerGeometry,
        initial: TrailerInitialRange,
    ) -> Result<Self> {
        if !(geometry.wheelbase > 0.0 && geometry.trailer_length > 0.0 && geometry.hitch_offset >= 0.0)
        {
            return Err(Error::contract("trailer geometry lengths must be positive"));
        }
        let spec = SystemSpec::new(
            Self::STATE_NAMES.iter().map(|s| s.to_string()).collect(),
            Self::INPUT_NAMES.iter().map(|s| s.to_string()).collect(),
            vec![
                Channel {
                    name: "steering".into(),
                    state_index: trailer_index::DELTA,
                    feature_count: 1,
                },
                Channel {
                    name: "trailer".into(),
                    state_index: trailer_index::KAPPA,
                    feature_count: 2,
                },
            ],
            horizon,
            sampling_time,
            noise_cov,
        )?;
        Ok(Self {
            spec,
            geometry,
            initial,
        })
    }

    /// Diagonal process noise `T_s * NOISE_RATES`.
    pub fn default_noise_cov(sampling_time: f64) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            6,
            Self::NOISE_RATES.iter().map(|r| r * sampling_time),
        ))
    }

    /// Nominal parameters implied by the geometry.
    pub fn nominal_params(&self) -> DynamicsParams {
        let ts = self.spec.sampling_time;
        let g = &self.geometry;
        DynamicsParams(vec![
            DVector::from_element(1, ts),
            DVector::from_vec(vec![
                -ts / g.trailer_length,
                -ts * g.hitch_offset / (g.trailer_length * g.wheelbase),
            ]),
        ])
    }

    /// Trailer axle position `(x_t, y_t)`.
    pub fn trailer_position(&self, x: &DVector<f64>) -> (f64, f64) {
        use trailer_index::*;
        let g = &self.geometry;
        (
            x[X_C] - g.hitch_offset * x[PHI].cos() - g.trailer_length * x[KAPPA].cos(),
            x[Y_C] - g.hitch_offset * x[PHI].sin() - g.trailer_length * x[KAPPA].sin(),
        )
    }
}

impl Dynamics for CarTrailer {
    fn spec(&self) -> &SystemSpec {
        &self.spec
    }

    fn known_part(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        use trailer_index::*;
        let ts = self.spec.sampling_time;
        let v = x[V_C];
        let mut next = x.clone();
        next[Y_C] += ts * v * x[PHI].sin();
        next[PHI] += ts * v * x[DELTA].tan() / self.geometry.wheelbase;
        next[X_C] += ts * v;
        next[V_C] += ts * u[ACCEL];
        next
    }

    fn feature_matrix(&self, x: &DVector<f64>, u: &DVector<f64>) -> Vec<DVector<f64>> {
        use trailer_index::*;
        let v = x[V_C];
        let rel = x[KAPPA] - x[PHI];
        vec![
            DVector::from_element(1, u[OMEGA]),
            DVector::from_vec(vec![v * rel.sin(), v * x[DELTA].tan() * rel.cos()]),
        ]
    }

    fn jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DynamicsParams,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        use trailer_index::*;
        self.spec.check_dims(x, u)?;
        self.spec.check_params(theta)?;
        let delta = x[DELTA];
        if !(delta.abs() < std::f64::consts::FRAC_PI_2) {
            return Err(Error::Domain(format!(
                "tan(delta) undefined at delta = {delta}"
            )));
        }
        let ts = self.spec.sampling_time;
        let l = self.geometry.wheelbase;
        let v = x[V_C];
        let (sp, cp) = x[PHI].sin_cos();
        let tan_d = delta.tan();
        let sec2 = 1.0 + tan_d * tan_d;
        let rel = x[KAPPA] - x[PHI];
        let (sr, cr) = rel.sin_cos();
        let t1 = theta.0[0][0];
        let (t21, t22) = (theta.0[1][0], theta.0[1][1]);

        let mut a = DMatrix::identity(6, 6);
        a[(Y_C, PHI)] = ts * v * cp;
        a[(Y_C, V_C)] = ts * sp;
        a[(PHI, DELTA)] = ts * v * sec2 / l;
        a[(PHI, V_C)] = ts * tan_d / l;
        let d_rel = t21 * v * cr - t22 * v * tan_d * sr;
        a[(KAPPA, KAPPA)] += d_rel;
        a[(KAPPA, PHI)] = -d_rel;
        a[(KAPPA, DELTA)] = t22 * v * sec2 * cr;
        a[(KAPPA, V_C)] = t21 * sr + t22 * tan_d * cr;
        a[(X_C, V_C)] = ts;

        let mut b = DMatrix::zeros(6, 2);
        b[(DELTA, OMEGA)] = t1;
        b[(V_C, ACCEL)] = ts;
        Ok((a, b))
    }

    fn curvature(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DynamicsParams,
        w: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        use trailer_index::*;
        self.spec.check_dims(x, u)?;
        self.spec.check_params(theta)?;
        let delta = x[DELTA];
        if !(delta.abs() < std::f64::consts::FRAC_PI_2) {
            return Err(Error::Domain(format!(
                "tan(delta) undefined at delta = {delta}"
            )));
        }
        let ts = self.spec.sampling_time;
        let l = self.geometry.wheelbase;
        let v = x[V_C];
        let (sp, cp) = x[PHI].sin_cos();
        let tan_d = delta.tan();
        let sec2 = 1.0 + tan_d * tan_d;
        let (sr, cr) = (x[KAPPA] - x[PHI]).sin_cos();
        let (t21, t22) = (theta.0[1][0], theta.0[1][1]);

        let mut h = DMatrix::zeros(8, 8);
        let mut add = |i: usize, j: usize, v: f64| {
            h[(i, j)] += v;
            if i != j {
                h[(j, i)] += v;
            }
        };
        // y_c+ = y_c + T_s v sin(phi)
        add(PHI, PHI, -w[Y_C] * ts * v * sp);
        add(PHI, V_C, w[Y_C] * ts * cp);
        // phi+ = phi + T_s v tan(delta) / a
        add(DELTA, DELTA, w[PHI] * ts * v * 2.0 * tan_d * sec2 / l);
        add(DELTA, V_C, w[PHI] * ts * sec2 / l);
        // kappa+ = kappa + t21 v sin(r) + t22 v tan(delta) cos(r), r = kappa - phi
        let wk = w[KAPPA];
        let rr = -wk * (t21 * v * sr + t22 * v * tan_d * cr);
        add(KAPPA, KAPPA, rr);
        add(PHI, PHI, rr);
        add(KAPPA, PHI, -rr);
        let rv = wk * (t21 * cr - t22 * tan_d * sr);
        add(KAPPA, V_C, rv);
        add(PHI, V_C, -rv);
        let rd = -wk * t22 * v * sec2 * sr;
        add(KAPPA, DELTA, rd);
        add(PHI, DELTA, -rd);
        add(DELTA, DELTA, wk * t22 * v * cr * 2.0 * tan_d * sec2);
        add(DELTA, V_C, wk * t22 * sec2 * cr);
        Ok(h)
    }

    fn sample_initial_state(&self, rng: &mut SimRng) -> DVector<f64> {
        use trailer_index::*;
        let r = &self.initial;
        let (phi, kappa) = loop {
            let phi = uniform(rng, r.heading);
            let kappa = uniform(rng, r.heading);
            if (kappa - phi).abs() <= r.max_articulation {
                break (phi, kappa);
            }
        };
        let mut x = DVector::zeros(6);
        x[Y_C] = uniform(rng, r.y_c);
        x[PHI] = phi;
        x[DELTA] = uniform(rng, r.steering);
        x[KAPPA] = kappa;
        x[X_C] = uniform(rng, r.x_c);
        x[V_C] = uniform(rng, r.speed);
        x
    }
}

/// Linear system `x+ = (A0 + dA) x + (B0 + dB) u`, where row `i` of `[dA dB]`
/// is the parameter block of channel `i` with features `[x; u]`.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    spec: SystemSpec,
    pub a0: DMatrix<f64>,
    pub b0: DMatrix<f64>,
    /// Initial states are uniform in `[-r, r]` per coordinate.
    pub initial_radius: f64,
}

impl LinearSystem {
    pub fn new(
        a0: DMatrix<f64>,
        b0: DMatrix<f64>,
        horizon: usize,
        sampling_time: f64,
        noise_cov: DMatrix<f64>,
        initial_radius: f64,
    ) -> Result<Self> {
        let n = a0.nrows();
        let m = b0.ncols();
        if a0.ncols() != n || b0.nrows() != n {
            return Err(Error::contract("A must be n x n and B must be n x m"));
        }
        let spec = SystemSpec::new(
            (0..n).map(|i| format!("x{i}")).collect(),
            (0..m).map(|j| format!("u{j}")).collect(),
            (0..n)
                .map(|i| Channel {
                    name: format!("row{i}"),
                    state_index: i,
                    feature_count: n + m,
                })
                .collect(),
            horizon,
            sampling_time,
            noise_cov,
        )?;
        Ok(Self {
            spec,
            a0,
            b0,
            initial_radius,
        })
    }

    /// Effective `(A, B)` for the given parameters.
    pub fn matrices(&self, theta: &DynamicsParams) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.spec.check_params(theta)?;
        let n = self.a0.nrows();
        let m = self.b0.ncols();
        let mut a = self.a0.clone();
        let mut b = self.b0.clone();
        for (i, row) in theta.0.iter().enumerate() {
            for j in 0..n {
                a[(i, j)] += row[j];
            }
            for j in 0..m {
                b[(i, j)] += row[n + j];
            }
        }
        Ok((a, b))
    }

    /// Parameters that reproduce the given `(A, B)` exactly.
    pub fn params_for(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DynamicsParams {
        let n = self.a0.nrows();
        let m = self.b0.ncols();
        DynamicsParams(
            (0..n)
                .map(|i| {
                    DVector::from_iterator(
                        n + m,
                        (0..n)
                            .map(|j| a[(i, j)] - self.a0[(i, j)])
                            .chain((0..m).map(|j| b[(i, j)] - self.b0[(i, j)])),
                    )
                })
                .collect(),
        )
    }

    pub fn zero_params(&self) -> DynamicsParams {
        let n = self.a0.nrows();
        let m = self.b0.ncols();
        DynamicsParams(vec![DVector::zeros(n + m); n])
    }
}

impl Dynamics for LinearSystem {
    fn spec(&self) -> &SystemSpec {
        &self.spec
    }

    fn known_part(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a0 * x + &self.b0 * u
    }

    fn feature_matrix(&self, x: &DVector<f64>, u: &DVector<f64>) -> Vec<DVector<f64>> {
        let xu = DVector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied());
        vec![xu; self.spec.state_dim()]
    }

    fn jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DynamicsParams,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.spec.check_dims(x, u)?;
        self.matrices(theta)
    }

    fn curvature(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DynamicsParams,
        _weights: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        self.spec.check_dims(x, u)?;
        self.spec.check_params(theta)?;
        Ok(DMatrix::zeros(x.len() + u.len(), x.len() + u.len()))
    }

    fn sample_initial_state(&self, rng: &mut SimRng) -> DVector<f64> {
        let r = self.initial_radius;
        DVector::from_fn(self.spec.state_dim(), |_, _| {
            uniform(rng, [-r, r])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedableRng;
    use trailer_index::*;

    fn trailer(ts: f64) -> CarTrailer {
        CarTrailer::new(
            40,
            ts,
            CarTrailer::default_noise_cov(ts),
            TrailerGeometry::default(),
            TrailerInitialRange::default(),
        )
        .unwrap()
    }

    fn params(t1: f64, t2: [f64; 2]) -> DynamicsParams {
        DynamicsParams(vec![
            DVector::from_element(1, t1),
            DVector::from_vec(t2.to_vec()),
        ])
    }

    #[test]
    fn zero_velocity_is_fixed_point() {
        let sys = trailer(0.1);
        let x = DVector::from_vec(vec![0.3, -0.2, 0.1, 0.25, 5.0, 0.0]);
        let u = DVector::zeros(2);
        let next = sys.step_nominal(&x, &u, &params(0.7, [1.3, -2.0])).unwrap();
        assert_eq!(next, x);
    }

    #[test]
    fn unit_speed_advances_longitudinal_position() {
        let sys = trailer(0.1);
        let x = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let next = sys
            .step_nominal(&x, &DVector::zeros(2), &params(0.1, [0.0, 0.0]))
            .unwrap();
        let expected = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.1, 1.0]);
        assert!((next - expected).amax() < 1e-15);
    }

    #[test]
    fn identity_linear_dynamics() {
        let sys = LinearSystem::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            5,
            1.0,
            DMatrix::zeros(2, 2),
            1.0,
        )
        .unwrap();
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let next = sys.step_nominal(&e1, &e1, &sys.zero_params()).unwrap();
        assert_eq!(next, DVector::from_vec(vec![2.0, 0.0]));
        let (a, b) = sys.jacobians(&e1, &e1, &sys.zero_params()).unwrap();
        assert_eq!(a, DMatrix::identity(2, 2));
        assert_eq!(b, DMatrix::identity(2, 2));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let sys = trailer(0.1);
        let err = sys
            .step_nominal(&DVector::zeros(5), &DVector::zeros(2), &sys.nominal_params())
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn longitudinal_speed_derivative_is_sampling_time() {
        let sys = trailer(0.1);
        let mut rng = SimRng::seed_from_u64(3);
        for _ in 0..10 {
            let x = sys.sample_initial_state(&mut rng);
            let u = DVector::from_vec(vec![0.4, -1.0]);
            let (a, _) = sys.jacobians(&x, &u, &sys.nominal_params()).unwrap();
            assert_eq!(a[(X_C, V_C)], 0.1);
        }
    }

    /// Finite-difference curvature through the trait's default method.
    #[derive(Debug)]
    struct Numeric<'a>(&'a CarTrailer);

    impl Dynamics for Numeric<'_> {
        fn spec(&self) -> &SystemSpec {
            self.0.spec()
        }
        fn known_part(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            self.0.known_part(x, u)
        }
        fn feature_matrix(&self, x: &DVector<f64>, u: &DVector<f64>) -> Vec<DVector<f64>> {
            self.0.feature_matrix(x, u)
        }
        fn jacobians(
            &self,
            x: &DVector<f64>,
            u: &DVector<f64>,
            theta: &DynamicsParams,
        ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
            self.0.jacobians(x, u, theta)
        }
        fn sample_initial_state(&self, rng: &mut SimRng) -> DVector<f64> {
            self.0.sample_initial_state(rng)
        }
    }

    #[test]
    fn curvature_matches_finite_differences() {
        let sys = trailer(0.1);
        let theta = params(0.12, [-0.06, -0.04]);
        let mut rng = SimRng::seed_from_u64(17);
        for _ in 0..20 {
            let mut x = sys.sample_initial_state(&mut rng);
            x[V_C] = rng.random_range(-1.5..1.5);
            let u = DVector::from_vec(vec![rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0)]);
            let w = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let exact = sys.curvature(&x, &u, &theta, &w).unwrap();
            let numeric = Numeric(&sys).curvature(&x, &u, &theta, &w).unwrap();
            assert!((&exact - &numeric).amax() < 1e-6, "{exact} vs {numeric}");
        }
    }

    #[test]
    fn jacobian_rejects_tan_singularity() {
        let sys = trailer(0.1);
        let mut x = DVector::zeros(6);
        x[DELTA] = std::f64::consts::FRAC_PI_2;
        let err = sys
            .jacobians(&x, &DVector::zeros(2), &sys.nominal_params())
            .unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn feature_rows() {
        let sys = trailer(0.1);
        let mut x = DVector::from_vec(vec![0.5, 0.2, 0.0, 0.2, 3.0, -1.0]);
        let u = DVector::from_vec(vec![1.0, 0.5]);
        let f = sys.feature_matrix(&x, &u);
        assert_eq!(f[0][0], 1.0);
        assert_eq!(f[1], DVector::from_vec(vec![0.0, 0.0]));
        x[V_C] = 0.0;
        x[KAPPA] = 0.6;
        x[DELTA] = 0.3;
        let f = sys.feature_matrix(&x, &u);
        assert_eq!(f[1], DVector::from_vec(vec![0.0, 0.0]));
    }

    #[test]
    fn noiseless_step_matches_nominal() {
        let sys = LinearSystem::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 1),
            5,
            1.0,
            DMatrix::zeros(2, 2),
            1.0,
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.3, -1.0]);
        let u = DVector::from_vec(vec![2.0]);
        let mut rng = SimRng::seed_from_u64(11);
        let theta = sys.zero_params();
        assert_eq!(
            sys.step_noisy(&x, &u, &theta, &mut rng).unwrap(),
            sys.step_nominal(&x, &u, &theta).unwrap()
        );
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let sys = trailer(0.1);
        let x = DVector::from_vec(vec![0.1, 0.0, 0.05, 0.02, 5.0, -0.5]);
        let u = DVector::from_vec(vec![0.3, 1.0]);
        let theta = sys.nominal_params();
        let a = sys
            .step_noisy(&x, &u, &theta, &mut SimRng::seed_from_u64(99))
            .unwrap();
        let b = sys
            .step_noisy(&x, &u, &theta, &mut SimRng::seed_from_u64(99))
            .unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn initial_states_respect_articulation_bound() {
        let sys = trailer(0.1);
        let mut rng = SimRng::seed_from_u64(5);
        for _ in 0..1000 {
            let x = sys.sample_initial_state(&mut rng);
            assert!((x[KAPPA] - x[PHI]).abs() <= 0.5);
            assert!((4.0..=8.0).contains(&x[X_C]));
        }
    }

    #[test]
    fn rejects_asymmetric_noise() {
        let mut cov = DMatrix::identity(2, 2);
        cov[(0, 1)] = 0.5;
        assert!(LinearSystem::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 1),
            3,
            1.0,
            cov,
            1.0
        )
        .is_err());
    }
}
