//! Discrete IMU kinematics, state/covariance propagation between scans, and
//! the rigid re-anchoring of the buffered pose chain after an update.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{right_jacobian, skew, Pose3, Rot3};
use crate::state::{idx, FilterState, StateCov, TangentVec};
use crate::uncertainty::PoseWithCov;

/// Dimension of the noise vector `w = [n_ω; n_a; n_bω; n_ba]`.
pub const NOISE_DIM: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    /// seconds
    pub t: f64,
    /// measured angular velocity (rad/s)
    pub gyro: Vector3<f64>,
    /// measured specific force (m/s²)
    pub acc: Vector3<f64>,
}

impl ImuSample {
    pub fn new(t: f64, gyro: Vector3<f64>, acc: Vector3<f64>) -> Self {
        ImuSample { t, gyro, acc }
    }
}

/// Continuous-time noise densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// rad/s/√Hz
    pub gyro: f64,
    /// m/s²/√Hz
    pub acc: f64,
    /// rad/s²/√Hz
    pub gyro_bias_walk: f64,
    /// m/s³/√Hz
    pub acc_bias_walk: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams { gyro: 0.01, acc: 0.1, gyro_bias_walk: 1e-4, acc_bias_walk: 1e-3 }
    }
}

impl NoiseParams {
    pub fn zero() -> Self {
        NoiseParams { gyro: 0.0, acc: 0.0, gyro_bias_walk: 0.0, acc_bias_walk: 0.0 }
    }

    pub fn is_valid(&self) -> bool {
        [self.gyro, self.acc, self.gyro_bias_walk, self.acc_bias_walk].iter().all(|x| *x >= 0.0 && x.is_finite())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImuError {
    #[error("propagation interval must be positive, got {0}")]
    NonPositiveInterval(f64),
    #[error("pose buffer is empty")]
    EmptyBuffer,
}

fn noise_part(w: Option<&[f64; NOISE_DIM]>, at: usize) -> Vector3<f64> {
    w.map_or_else(Vector3::zeros, |w| Vector3::new(w[at], w[at + 1], w[at + 2]))
}

/// The per-block rate `f(x, u, w)`; `dt` enters the position row through the
/// half-acceleration term.
pub fn kinematics_f_noisy(x: &FilterState, u: &ImuSample, w: Option<&[f64; NOISE_DIM]>, dt: f64) -> TangentVec {
    let mut f = TangentVec::zeros(x.dim());
    let omega = u.gyro - x.bias_gyro - noise_part(w, 0);
    let acc = x.rot.act(&(u.acc - x.bias_acc - noise_part(w, 3))) + x.gravity;
    f.fixed_rows_mut::<3>(idx::ROT).copy_from(&omega);
    f.fixed_rows_mut::<3>(idx::POS).copy_from(&(x.vel + 0.5 * acc * dt));
    f.fixed_rows_mut::<3>(idx::VEL).copy_from(&acc);
    f.fixed_rows_mut::<3>(idx::BG).copy_from(&noise_part(w, 6));
    f.fixed_rows_mut::<3>(idx::BA).copy_from(&noise_part(w, 9));
    f
}

/// `f(x, u, 0)`.
pub fn kinematics_f(x: &FilterState, u: &ImuSample, dt: f64) -> TangentVec {
    kinematics_f_noisy(x, u, None, dt)
}

/// `x ⊞ (Δt·f(x, u, w))`.
pub fn discrete_step(x: &FilterState, u: &ImuSample, w: Option<&[f64; NOISE_DIM]>, dt: f64) -> FilterState {
    x.boxplus(&(kinematics_f_noisy(x, u, w, dt) * dt)).expect("rate has state dimension")
}

/// `(F_x̃, F_w)`, the Jacobians of the ⊟-error of [`discrete_step`] at zero
/// error and zero noise.
pub fn propagation_jacobians(x: &FilterState, u: &ImuSample, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = x.dim();
    let r = *x.rot.matrix();
    let omega_dt = (u.gyro - x.bias_gyro) * dt;
    let acc_body = u.acc - x.bias_acc;
    let ra_skew = r * skew(&acc_body);
    let jr_dt = right_jacobian(&omega_dt) * dt;
    let i3 = Matrix3::identity();
    let half_dt2 = 0.5 * dt * dt;

    let mut fx = DMatrix::identity(n, n);
    let put = |m: &mut DMatrix<f64>, row: usize, col: usize, b: Matrix3<f64>| {
        m.fixed_view_mut::<3, 3>(row, col).copy_from(&b);
    };
    put(&mut fx, idx::ROT, idx::ROT, *Rot3::exp(&-omega_dt).matrix());
    put(&mut fx, idx::ROT, idx::BG, -jr_dt);
    put(&mut fx, idx::POS, idx::ROT, -half_dt2 * ra_skew);
    put(&mut fx, idx::POS, idx::VEL, i3 * dt);
    put(&mut fx, idx::POS, idx::BA, -half_dt2 * r);
    put(&mut fx, idx::POS, idx::GRAV, i3 * half_dt2);
    put(&mut fx, idx::VEL, idx::ROT, -dt * ra_skew);
    put(&mut fx, idx::VEL, idx::BA, -dt * r);
    put(&mut fx, idx::VEL, idx::GRAV, i3 * dt);

    let mut fw = DMatrix::zeros(n, NOISE_DIM);
    put(&mut fw, idx::ROT, 0, -jr_dt);
    put(&mut fw, idx::POS, 3, -half_dt2 * r);
    put(&mut fw, idx::VEL, 3, -dt * r);
    put(&mut fw, idx::BG, 6, i3 * dt);
    put(&mut fw, idx::BA, 9, i3 * dt);
    (fx, fw)
}

/// Discrete covariance of `w` over one step: densities squared over `dt`, so
/// that `F_w·Q·F_wᵀ` accumulates `n²·dt`.
pub fn process_noise(noise: &NoiseParams, dt: f64) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(NOISE_DIM, NOISE_DIM);
    for (block, density) in [noise.gyro, noise.acc, noise.gyro_bias_walk, noise.acc_bias_walk].iter().enumerate() {
        for k in 0..3 {
            q[(3 * block + k, 3 * block + k)] = density * density / dt;
        }
    }
    q
}

/// One propagation step: mean through the discrete model, covariance through
/// `F_x̃·Σ·F_x̃ᵀ + F_w·Q·F_wᵀ`.
pub fn propagate(
    x: &FilterState,
    cov: &StateCov,
    u: &ImuSample,
    dt: f64,
    noise: &NoiseParams,
) -> Result<(FilterState, StateCov), ImuError> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(ImuError::NonPositiveInterval(dt));
    }
    let next = discrete_step(x, u, None, dt);
    let (fx, fw) = propagation_jacobians(x, u, dt);
    let q = process_noise(noise, dt);
    let p = &fx * cov * fx.transpose() + &fw * q * fw.transpose();
    Ok((next, (&p + p.transpose()) * 0.5))
}

/// Pose snapshot kept for spline control points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StampedPose {
    pub t: f64,
    pub pose: PoseWithCov,
}

/// Re-anchors a buffered pose chain on the optimised state: every entry is
/// left-multiplied by `T_opt·T_pre⁻¹`, so relative motion inside the buffer is
/// untouched and the chain passes through the optimised pose.
pub fn recalc_pose_buffer(
    buffer: &[StampedPose],
    pre_update: &Pose3,
    optimized: &FilterState,
) -> Result<Vec<StampedPose>, ImuError> {
    if buffer.is_empty() {
        return Err(ImuError::EmptyBuffer);
    }
    let correction = optimized.pose() * pre_update.inverse();
    let ad = correction.adjoint();
    Ok(buffer
        .iter()
        .map(|s| StampedPose {
            t: s.t,
            pose: PoseWithCov::new(correction * s.pose.pose, ad * s.pose.cov * ad.transpose()),
        })
        .collect())
}

/// Mean specific force and rate over a static window; used to level the
/// initial state.
pub fn static_alignment(samples: &[ImuSample]) -> Option<(Vector3<f64>, Vector3<f64>)> {
    if samples.is_empty() {
        return None;
    }
    let n = samples.len() as f64;
    let gyro = samples.iter().fold(Vector3::zeros(), |a, s| a + s.gyro) / n;
    let acc = samples.iter().fold(Vector3::zeros(), |a, s| a + s.acc) / n;
    Some((gyro, acc))
}

/// Stacks a state into a plain vector; handy for diagnostics.
pub fn vector_parts(x: &FilterState) -> DVector<f64> {
    let mut v = DVector::zeros(15);
    v.fixed_rows_mut::<3>(0).copy_from(&x.pos);
    v.fixed_rows_mut::<3>(3).copy_from(&x.vel);
    v.fixed_rows_mut::<3>(6).copy_from(&x.bias_gyro);
    v.fixed_rows_mut::<3>(9).copy_from(&x.bias_acc);
    v.fixed_rows_mut::<3>(12).copy_from(&x.gravity);
    v
}
