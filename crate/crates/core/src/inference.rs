//! Conjugate Gaussian beliefs over the parameter blocks and the episode
//! dataset they are learned from.
//!
//! Each dynamics channel and the objective form independent Bayesian linear
//! regressions with known observation noise. Updates are carried out in
//! information form through Cholesky factorizations.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::benchmark::Benchmark;
use crate::error::{Error, Result};
use crate::model::{DynamicsParams, ParamVector};
use crate::rng::{standard_normal_vector, SimRng};

/// Updates whose posterior precision has a larger condition number are flagged.
pub const CONDITION_WARNING: f64 = 1e12;

/// Floor applied to observation-noise variances taken from noiseless models.
pub const MIN_NOISE_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    noise_var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateStatus {
    Ok,
    IllConditioned { condition: f64 },
}

#[derive(Debug, Clone)]
pub struct BeliefUpdate {
    pub belief: GaussianBelief,
    pub status: UpdateStatus,
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, noise_var: f64) -> Result<Self> {
        let p = mean.len();
        if p == 0 || cov.shape() != (p, p) {
            return Err(Error::contract("belief mean/covariance dimensions differ"));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::contract("belief entries must be finite"));
        }
        if (&cov - cov.transpose()).amax() > 1e-12 * (1.0 + cov.amax()) {
            return Err(Error::contract("belief covariance must be symmetric"));
        }
        if cov.clone().cholesky().is_none() {
            return Err(Error::contract("belief covariance must be positive definite"));
        }
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(Error::contract("observation-noise variance must be positive"));
        }
        Ok(Self {
            mean,
            cov,
            noise_var,
        })
    }

    /// Independent prior with the given standard deviations.
    pub fn diagonal(mean: DVector<f64>, std: &[f64], noise_var: f64) -> Result<Self> {
        if std.len() != mean.len() {
            return Err(Error::contract("std length differs from mean length"));
        }
        let cov = DMatrix::from_diagonal(&DVector::from_iterator(
            std.len(),
            std.iter().map(|s| s * s),
        ));
        Self::new(mean, cov, noise_var)
    }

    /// Degenerate belief concentrated on `mean`. Updates leave it unchanged
    /// and samples return the mean exactly.
    pub fn point_mass(mean: DVector<f64>, noise_var: f64) -> Self {
        let p = mean.len();
        Self {
            mean,
            cov: DMatrix::zeros(p, p),
            noise_var,
        }
    }

    pub fn is_point_mass(&self) -> bool {
        self.cov.iter().all(|v| *v == 0.0)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Conjugate update with regressors `phi` (M x p) and targets `y` (M).
    ///
    /// `Sigma' = (Sigma^-1 + phi^T phi / s^2)^-1`,
    /// `mu' = Sigma' (Sigma^-1 mu + phi^T y / s^2)`.
    pub fn update(&self, phi: &DMatrix<f64>, y: &DVector<f64>) -> Result<BeliefUpdate> {
        if phi.nrows() != y.len() || (phi.nrows() > 0 && phi.ncols() != self.dim()) {
            return Err(Error::contract(format!(
                "regressors {:?} incompatible with {} targets and dimension {}",
                phi.shape(),
                y.len(),
                self.dim()
            )));
        }
        if phi.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::contract("regression data must be finite"));
        }
        if phi.nrows() == 0 || phi.iter().all(|v| *v == 0.0) || self.is_point_mass() {
            return Ok(BeliefUpdate {
                belief: self.clone(),
                status: UpdateStatus::Ok,
            });
        }
        let prior = self
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numerical(self.diagnostics("prior factorization failed"), 0))?;
        let inv_s2 = 1.0 / self.noise_var;
        let mut precision = prior.inverse() + phi.tr_mul(phi) * inv_s2;
        symmetrize(&mut precision);
        let info = prior.solve(&self.mean) + phi.tr_mul(y) * inv_s2;
        let post = precision.clone().cholesky().ok_or_else(|| {
            Error::numerical(self.diagnostics("posterior precision factorization failed"), 0)
        })?;
        let mean = post.solve(&info);
        let mut cov = post.inverse();
        symmetrize(&mut cov);

        let eig = precision.symmetric_eigenvalues();
        let condition = eig.max() / eig.min();
        let status = if !(condition <= CONDITION_WARNING) {
            log::warn!("ill-conditioned belief update (condition {condition:.3e})");
            UpdateStatus::IllConditioned { condition }
        } else {
            UpdateStatus::Ok
        };
        Ok(BeliefUpdate {
            belief: GaussianBelief {
                mean,
                cov,
                noise_var: self.noise_var,
            },
            status,
        })
    }

    pub fn sample(&self, rng: &mut SimRng) -> Result<DVector<f64>> {
        if self.is_point_mass() {
            return Ok(self.mean.clone());
        }
        let chol = self
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numerical(self.diagnostics("sampling factorization failed"), 0))?;
        let z = standard_normal_vector(rng, self.dim());
        Ok(&self.mean + chol.l() * z)
    }

    fn diagnostics(&self, what: &str) -> String {
        let eig = self.cov.clone().symmetric_eigenvalues();
        format!(
            "{what}: dim {}, covariance eigenvalues in [{:.3e}, {:.3e}], trace {:.3e}",
            self.dim(),
            eig.min(),
            eig.max(),
            self.cov.trace()
        )
    }
}

/// One row of the dataset: a transition with its noisy cost observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub episode: usize,
    pub step: usize,
    pub state: DVector<f64>,
    pub input: DVector<f64>,
    pub next_state: DVector<f64>,
    pub cost_observation: f64,
}

/// One belief per dynamics channel plus one for the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefBundle {
    pub dynamics: Vec<GaussianBelief>,
    pub objective: GaussianBelief,
}

impl BeliefBundle {
    pub fn check_against(&self, bench: &Benchmark) -> Result<()> {
        let channels = bench.system.spec().channels();
        if channels.len() != self.dynamics.len()
            || channels
                .iter()
                .zip(&self.dynamics)
                .any(|(c, b)| c.feature_count != b.dim())
            || self.objective.dim() != bench.objective.feature_count()
        {
            return Err(Error::contract("belief blocks do not match benchmark features"));
        }
        Ok(())
    }

    pub fn point_mass(&self) -> BeliefBundle {
        let pm = |b: &GaussianBelief| GaussianBelief::point_mass(b.mean().clone(), b.noise_var());
        BeliefBundle {
            dynamics: self.dynamics.iter().map(pm).collect(),
            objective: pm(&self.objective),
        }
    }

    pub fn mean_params(&self) -> ParamVector {
        ParamVector {
            objective: self.objective.mean().clone(),
            dynamics: DynamicsParams(self.dynamics.iter().map(|b| b.mean().clone()).collect()),
        }
    }

    /// Trace of each block covariance: dynamics channels first, objective last.
    pub fn traces(&self) -> Vec<f64> {
        self.dynamics
            .iter()
            .chain(std::iter::once(&self.objective))
            .map(|b| b.cov().trace())
            .collect()
    }

    /// Independent draw from every block (objective first, then channels).
    pub fn sample(&self, rng: &mut SimRng) -> Result<ParamVector> {
        let objective = self.objective.sample(rng)?;
        let dynamics = self
            .dynamics
            .iter()
            .map(|b| b.sample(rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamVector {
            objective,
            dynamics: DynamicsParams(dynamics),
        })
    }

    /// Extends the beliefs with one complete episode.
    ///
    /// Channel `c` regresses `x+[i_c] - known(x, u)[i_c]` on its features; the
    /// objective regresses `y - known_cost` on the objective features.
    pub fn absorb_episode(&self, episode: &[Transition], bench: &Benchmark) -> Result<BeliefBundle> {
        self.check_against(bench)?;
        let horizon = bench.horizon();
        if episode.len() != horizon {
            return Err(Error::contract(format!(
                "episode holds {} transitions, expected {horizon}",
                episode.len()
            )));
        }
        for (k, t) in episode.iter().enumerate() {
            if t.step != k || t.episode != episode[0].episode {
                return Err(Error::contract("episode transitions out of order"));
            }
        }
        let sys = &bench.system;
        let channels = sys.spec().channels();
        let mut dynamics = Vec::with_capacity(channels.len());
        for (c, (channel, belief)) in channels.iter().zip(&self.dynamics).enumerate() {
            let mut phi = DMatrix::zeros(horizon, channel.feature_count);
            let mut y = DVector::zeros(horizon);
            for (row, t) in episode.iter().enumerate() {
                let features = sys.feature_matrix(&t.state, &t.input);
                phi.set_row(row, &features[c].transpose());
                y[row] = t.next_state[channel.state_index]
                    - sys.known_part(&t.state, &t.input)[channel.state_index];
            }
            dynamics.push(belief.update(&phi, &y)?.belief);
        }
        let obj = &bench.objective;
        let mut phi = DMatrix::zeros(horizon, obj.feature_count());
        let mut y = DVector::zeros(horizon);
        for (row, t) in episode.iter().enumerate() {
            phi.set_row(row, &obj.features(t.step, &t.state, &t.input).transpose());
            y[row] = t.cost_observation - obj.known_cost(t.step, &t.state, &t.input);
        }
        let objective = self.objective.update(&phi, &y)?.belief;
        Ok(BeliefBundle {
            dynamics,
            objective,
        })
    }
}

/// Column header of the dataset CSV for the given benchmark.
pub fn dataset_header(bench: &Benchmark) -> Vec<String> {
    let spec = bench.system.spec();
    let mut header = vec!["episode".to_string(), "step".to_string()];
    header.extend(spec.state_names().iter().cloned());
    header.extend(spec.input_names().iter().cloned());
    header.extend(spec.state_names().iter().map(|s| format!("next_{s}")));
    header.push("cost_obs".into());
    header
}

pub fn write_dataset<W: Write>(writer: W, rows: &[Transition], bench: &Benchmark) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(dataset_header(bench))?;
    for t in rows {
        let mut rec = vec![t.episode.to_string(), t.step.to_string()];
        rec.extend(t.state.iter().map(|v| v.to_string()));
        rec.extend(t.input.iter().map(|v| v.to_string()));
        rec.extend(t.next_state.iter().map(|v| v.to_string()));
        rec.push(t.cost_observation.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(reader: R, bench: &Benchmark) -> Result<Vec<Transition>> {
    let n = bench.state_dim();
    let m = bench.input_dim();
    let mut r = csv::Reader::from_reader(reader);
    let expected = dataset_header(bench);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != expected {
        return Err(Error::Parse(format!(
            "dataset header {header:?} does not match {expected:?}"
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("row {}: column {}: {e}", line + 2, expected[i])))
        };
        let int = |i: usize| -> Result<usize> {
            rec[i]
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("row {}: column {}: {e}", line + 2, expected[i])))
        };
        let vec_at = |start: usize, len: usize| -> Result<DVector<f64>> {
            Ok(DVector::from_vec(
                (start..start + len).map(num).collect::<Result<Vec<_>>>()?,
            ))
        };
        rows.push(Transition {
            episode: int(0)?,
            step: int(1)?,
            state: vec_at(2, n)?,
            input: vec_at(2 + n, m)?,
            next_state: vec_at(2 + n + m, n)?,
            cost_observation: num(2 + 2 * n + m)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedableRng;
    use proptest::prelude::*;

    fn batch_oracle(b: &GaussianBelief, phi: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let s2 = b.noise_var();
        let prior_inv = b.cov().clone().try_inverse().unwrap();
        let cov = (&prior_inv + phi.transpose() * phi / s2).try_inverse().unwrap();
        let mean = &cov * (&prior_inv * b.mean() + phi.transpose() * y / s2);
        (mean, cov)
    }

    #[test]
    fn no_data_returns_prior() {
        let b = GaussianBelief::diagonal(DVector::from_vec(vec![1.0, 2.0]), &[0.5, 0.3], 0.1).unwrap();
        let up = b.update(&DMatrix::zeros(0, 2), &DVector::zeros(0)).unwrap();
        assert_eq!(up.belief, b);
    }

    #[test]
    fn zero_width_prior_is_rejected() {
        assert!(GaussianBelief::diagonal(DVector::zeros(2), &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn degenerate_covariance_samples_mean() {
        let mean = DVector::from_vec(vec![0.3, -1.2, 4.0]);
        let b = GaussianBelief::new(mean.clone(), DMatrix::identity(3, 3) * 1e-18, 1.0).unwrap();
        let mut rng = SimRng::seed_from_u64(2);
        assert!((b.sample(&mut rng).unwrap() - mean).amax() < 1e-8);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let b = GaussianBelief::diagonal(DVector::zeros(3), &[1.0, 2.0, 3.0], 1.0).unwrap();
        let a = b.sample(&mut SimRng::seed_from_u64(8)).unwrap();
        let c = b.sample(&mut SimRng::seed_from_u64(8)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn sample_moments_match() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 2.0]);
        let mean = DVector::from_vec(vec![1.0, -1.0]);
        let b = GaussianBelief::new(mean.clone(), cov.clone(), 1.0).unwrap();
        let mut rng = SimRng::seed_from_u64(21);
        let m = 100_000;
        let draws: Vec<_> = (0..m).map(|_| b.sample(&mut rng).unwrap()).collect();
        let emp_mean = draws.iter().fold(DVector::zeros(2), |acc, d| acc + d) / m as f64;
        let emp_cov = draws.iter().fold(DMatrix::zeros(2, 2), |acc, d| {
            let c = d - &emp_mean;
            acc + &c * c.transpose()
        }) / (m as f64 - 1.0);
        for i in 0..2 {
            let se = (cov[(i, i)] / m as f64).sqrt();
            assert!((emp_mean[i] - mean[i]).abs() < 3.0 * se);
            for j in 0..2 {
                // Var of a sample covariance entry: (S_ii S_jj + S_ij^2) / m.
                let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / m as f64).sqrt();
                assert!((emp_cov[(i, j)] - cov[(i, j)]).abs() < 3.0 * se);
            }
        }
    }

    #[test]
    fn consistent_with_generating_parameter() {
        let mut rng = SimRng::seed_from_u64(4);
        let truth = DVector::from_vec(vec![0.7, -1.3, 2.1]);
        let phi = DMatrix::from_fn(10_000, 3, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let noise = standard_normal_vector(&mut rng, 10_000) * 0.1;
        let y = &phi * &truth + noise;
        let b = GaussianBelief::diagonal(DVector::zeros(3), &[10.0; 3], 0.01).unwrap();
        let post = b.update(&phi, &y).unwrap().belief;
        assert!((post.mean() - truth).norm() < 0.01);
    }

    #[test]
    fn rejects_non_finite_data() {
        let b = GaussianBelief::diagonal(DVector::zeros(1), &[1.0], 1.0).unwrap();
        let phi = DMatrix::from_element(1, 1, f64::NAN);
        assert!(matches!(
            b.update(&phi, &DVector::zeros(1)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn flags_ill_conditioned_update() {
        let b = GaussianBelief::diagonal(DVector::zeros(2), &[1.0, 1.0], 1e-14).unwrap();
        let phi = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let up = b.update(&phi, &DVector::from_element(1, 1.0)).unwrap();
        assert!(matches!(up.status, UpdateStatus::IllConditioned { .. }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn sequential_equals_batch(
            p in 1usize..=8, rows in 1usize..=200, seed in any::<u64>(),
        ) {
            let mut rng = SimRng::seed_from_u64(seed);
            let mean = standard_normal_vector(&mut rng, p);
            let std: Vec<f64> = (0..p).map(|_| rand::Rng::random_range(&mut rng, 0.5..2.0)).collect();
            let prior = GaussianBelief::diagonal(mean, &std, 0.3).unwrap();
            let phi = DMatrix::from_fn(rows, p, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
            let y = standard_normal_vector(&mut rng, rows);
            let mut seq = prior.clone();
            for r in 0..rows {
                seq = seq
                    .update(&phi.rows(r, 1).into_owned(), &DVector::from_element(1, y[r]))
                    .unwrap()
                    .belief;
            }
            let (bm, bc) = batch_oracle(&prior, &phi, &y);
            prop_assert!((seq.mean() - &bm).norm() <= 1e-10 * bm.norm().max(1.0));
            prop_assert!((seq.cov() - &bc).norm() <= 1e-10 * bc.norm());
            // Loewner order: prior covariance dominates.
            let gap = (prior.cov() - seq.cov()).symmetric_eigenvalues();
            prop_assert!(gap.min() >= -1e-10);
        }
    }
}
