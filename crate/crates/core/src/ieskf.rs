//! Iterated error-state Kalman update over any [`Manifold`] state.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::Manifold;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UpdateError {
    #[error("no residuals to fuse")]
    NoResiduals,
    #[error("measurement noise must be positive")]
    NonPositiveNoise,
    #[error("residual batch has inconsistent shapes")]
    Shape,
    #[error("prior covariance is not positive definite")]
    BadPrior,
}

/// Stacked scalar residuals `z`, their Jacobian rows `H` and noise `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBatch {
    pub z: DVector<f64>,
    pub h: DMatrix<f64>,
    pub r: DVector<f64>,
}

impl ResidualBatch {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    fn check(&self, dim: usize) -> Result<(), UpdateError> {
        if self.is_empty() {
            return Err(UpdateError::NoResiduals);
        }
        if self.h.nrows() != self.len() || self.r.len() != self.len() || self.h.ncols() != dim {
            return Err(UpdateError::Shape);
        }
        if self.r.iter().any(|r| !(*r > 0.0)) {
            return Err(UpdateError::NonPositiveNoise);
        }
        Ok(())
    }
}

/// Produces residuals and Jacobians at a state. Association is the model's
/// business; the filter only requires that repeated calls at the same state
/// agree.
pub trait MeasurementModel<M: Manifold> {
    fn measure(&mut self, x: &M) -> ResidualBatch;
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorDistribution<M: Manifold> {
    pub anchor: M,
    pub cov: DMatrix<f64>,
}

/// `(x̂ᵏ ⊟ x̂_i, Jᵏ)`.
pub fn prior_error<M: Manifold>(iterate: &M, anchor: &M) -> (DVector<f64>, DMatrix<f64>) {
    (iterate.minus(anchor), iterate.minus_jacobian(anchor))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateConfig {
    /// stop once the step norm falls below this
    pub epsilon: f64,
    pub max_iter: usize,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        UpdateConfig { epsilon: 1e-3, max_iter: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateResult<M: Manifold> {
    pub state: M,
    pub cov: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// objective at the anchor, then after every accepted step
    pub objective: Vec<f64>,
}

fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    if let Some(c) = Cholesky::new(sym.clone()) {
        return Some(c.inverse());
    }
    log::debug!("regularizing a singular normal matrix");
    let n = sym.nrows();
    Cholesky::new(sym + DMatrix::identity(n, n) * 1e-9).map(|c| c.inverse())
}

fn objective(prior_term: &DVector<f64>, prior_info: &DMatrix<f64>, batch: &ResidualBatch, weight: f64) -> f64 {
    let p = 0.5 * prior_term.dot(&(prior_info * prior_term));
    let m: f64 = batch.z.iter().zip(batch.r.iter()).map(|(z, r)| (weight * z).powi(2) / r).sum();
    p + 0.5 * m
}

/// Iterated update. `weight` scales both `z` and `H`.
pub fn iterate_update<M: Manifold, F: MeasurementModel<M>>(
    prior: &PriorDistribution<M>,
    model: &mut F,
    weight: f64,
    config: &UpdateConfig,
) -> Result<UpdateResult<M>, UpdateError> {
    let n = prior.anchor.tangent_dim();
    let prior_info = spd_inverse(&prior.cov).ok_or(UpdateError::BadPrior)?;
    let mut x = prior.anchor.clone();
    let mut batch = model.measure(&x);
    batch.check(n)?;
    let mut current = objective(&DVector::zeros(n), &prior_info, &batch, weight);
    let mut trace = vec![current];
    let mut posterior = prior.cov.clone();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iter.max(1) {
        iterations += 1;
        let (err, jac) = prior_error(&x, &prior.anchor);
        let jac_inv = jac.clone().try_inverse().unwrap_or_else(|| DMatrix::identity(n, n));
        let p = &jac_inv * &prior.cov * jac_inv.transpose();
        let p_inv = spd_inverse(&p).ok_or(UpdateError::BadPrior)?;

        let h = &batch.h * weight;
        let z = &batch.z * weight;
        let r_inv = batch.r.map(|r| 1.0 / r);
        let mut ht_rinv = h.transpose();
        for (j, mut col) in ht_rinv.column_iter_mut().enumerate() {
            col *= r_inv[j];
        }
        let normal = &ht_rinv * &h + &p_inv;
        let normal_inv = spd_inverse(&normal).ok_or(UpdateError::BadPrior)?;
        let k = &normal_inv * &ht_rinv;
        let i_kh = DMatrix::identity(n, n) - &k * &h;
        let step = -(&k * &z) - &i_kh * (&jac_inv * &err);
        let cov = &i_kh * &p;
        posterior = (&cov + cov.transpose()) * 0.5;

        // backtrack on the exact objective
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let trial = x.plus(&(&step * alpha));
            let trial_batch = model.measure(&trial);
            if trial_batch.check(n).is_ok() {
                let value = objective(&trial.minus(&prior.anchor), &prior_info, &trial_batch, weight);
                if value <= current + 1e-12 {
                    accepted = Some((trial, trial_batch, value));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((trial, trial_batch, value)) = accepted else {
            converged = true;
            break;
        };
        let moved = step.norm() * alpha;
        x = trial;
        batch = trial_batch;
        current = value;
        trace.push(value);
        if moved < config.epsilon {
            converged = true;
            break;
        }
    }
    Ok(UpdateResult { state: x, cov: posterior, iterations, converged, objective: trace })
}
