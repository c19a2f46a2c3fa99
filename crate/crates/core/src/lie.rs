//! SO(3)/SE(3) algebra used by every other module.
//!
//! Conventions:
//! - Twists are stacked rotation first: `[φ; ρ]` (rad, m).
//! - Pose covariances are expressed with a left perturbation, `T = exp(ξ^)·T̄`.
//! - Filter states perturb rotations on the right, `R = R̄·exp(δ^)` (see [`crate::state`]).

use nalgebra::{Matrix3, Matrix4, Matrix6, SMatrix, UnitQuaternion, Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this angle the closed forms switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Logarithms closer than this to a half turn are refused.
pub const LOG_PI_MARGIN: f64 = 1e-6;

/// Tangent element of SE(3), `[φ (rad); ρ (m)]`.
pub type Twist6 = Vector6<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LieError {
    #[error("non-finite tangent vector")]
    NonFinite,
    #[error("rotation angle {0} is too close to pi for a unique logarithm")]
    NearPi(f64),
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Right Jacobian of SO(3).
pub fn right_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() - 0.5 * k + k * k / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() - (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * k * k
}

pub fn right_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + 0.5 * k + k * k / 12.0;
    }
    let coef = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + coef * k * k
}

/// Left Jacobian of SO(3); also the `V` matrix of the SE(3) exponential.
pub fn left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    right_jacobian(&-w)
}

pub fn left_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    right_jacobian_inv(&-w)
}

/// Rotation matrix in SO(3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rot3(Matrix3<f64>);

impl Default for Rot3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rot3 {
    pub fn identity() -> Self {
        Rot3(Matrix3::identity())
    }

    /// Wraps a matrix without checking orthonormality.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rot3(m)
    }

    /// Projects an approximately orthonormal matrix back onto SO(3).
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let q = UnitQuaternion::from_matrix(m);
        Rot3(*q.to_rotation_matrix().matrix())
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Rot3(*q.to_rotation_matrix().matrix())
    }

    /// Roll/pitch/yaw (rad), applied as `Rz(yaw)·Ry(pitch)·Rx(roll)`.
    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64) -> Self {
        Rot3(*nalgebra::Rotation3::from_euler_angles(roll, pitch, yaw).matrix())
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(self.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Rodrigues formula. Callers are trusted to pass finite input; see [`so3_exp`].
    pub fn exp(w: &Vector3<f64>) -> Self {
        let theta = w.norm();
        let k = skew(w);
        if theta < SMALL_ANGLE {
            return Rot3(Matrix3::identity() + k + 0.5 * k * k);
        }
        let m = Matrix3::identity()
            + theta.sin() / theta * k
            + (1.0 - theta.cos()) / (theta * theta) * k * k;
        Rot3(m)
    }

    /// Rotation vector through the unit quaternion, well conditioned up to and
    /// including a half turn.
    pub fn log(&self) -> Vector3<f64> {
        let q = self.to_quaternion();
        let (mut w, mut v) = (q.w, q.imag());
        if w < 0.0 {
            w = -w;
            v = -v;
        }
        let s = v.norm();
        if s < SMALL_ANGLE {
            // atan2(s, w)/s -> 1/w, with the cubic correction for accuracy.
            return v * (2.0 / w) * (1.0 - s * s / (3.0 * w * w));
        }
        v * (2.0 * s.atan2(w) / s)
    }

    pub fn angle(&self) -> f64 {
        self.log().norm()
    }

    pub fn inverse(&self) -> Self {
        Rot3(self.0.transpose())
    }

    pub fn act(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// `self ⊞ δ` with right perturbation.
    pub fn plus(&self, delta: &Vector3<f64>) -> Self {
        Rot3(self.0 * Rot3::exp(delta).0)
    }

    /// `self ⊟ other = log(otherᵀ·self)`.
    pub fn minus(&self, other: &Rot3) -> Vector3<f64> {
        (other.inverse() * *self).log()
    }
}

impl std::ops::Mul for Rot3 {
    type Output = Rot3;
    fn mul(self, rhs: Rot3) -> Rot3 {
        Rot3(self.0 * rhs.0)
    }
}

/// Checked exponential: rejects non-finite input.
pub fn so3_exp(w: &Vector3<f64>) -> Result<Rot3, LieError> {
    if !w.iter().all(|x| x.is_finite()) {
        return Err(LieError::NonFinite);
    }
    Ok(Rot3::exp(w))
}

/// Rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Pose3 {
    pub rot: Rot3,
    pub trans: Vector3<f64>,
}

impl Pose3 {
    pub fn new(rot: Rot3, trans: Vector3<f64>) -> Self {
        Pose3 { rot, trans }
    }

    pub fn identity() -> Self {
        Pose3::default()
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose3::new(Rot3::identity(), t)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rot.inverse();
        Pose3::new(rt, -(rt.act(&self.trans)))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot.act(p) + self.trans
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rot.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.trans);
        m
    }

    pub fn exp(xi: &Twist6) -> Self {
        let phi = xi.fixed_rows::<3>(0).into_owned();
        let rho = xi.fixed_rows::<3>(3).into_owned();
        Pose3::new(Rot3::exp(&phi), left_jacobian(&phi) * rho)
    }

    /// SE(3) logarithm; fails within [`LOG_PI_MARGIN`] of a half turn.
    pub fn log(&self) -> Result<Twist6, LieError> {
        let phi = self.rot.log();
        let angle = phi.norm();
        if angle >= std::f64::consts::PI - LOG_PI_MARGIN {
            return Err(LieError::NearPi(angle));
        }
        let rho = left_jacobian_inv(&phi) * self.trans;
        let mut xi = Twist6::zeros();
        xi.fixed_rows_mut::<3>(0).copy_from(&phi);
        xi.fixed_rows_mut::<3>(3).copy_from(&rho);
        Ok(xi)
    }

    /// Adjoint in the `[φ; ρ]` layout: `[[R, 0], [t^R, R]]`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rot.matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
        ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&(skew(&self.trans) * r));
        ad
    }
}

impl std::ops::Mul for Pose3 {
    type Output = Pose3;
    fn mul(self, rhs: Pose3) -> Pose3 {
        Pose3::new(self.rot * rhs.rot, self.rot.act(&rhs.trans) + self.trans)
    }
}

pub fn se3_exp(xi: &Twist6) -> Pose3 {
    Pose3::exp(xi)
}

pub fn se3_log(t: &Pose3) -> Result<Twist6, LieError> {
    t.log()
}

pub fn adjoint(t: &Pose3) -> Matrix6<f64> {
    t.adjoint()
}

/// Homogeneous-point operator `[ε; η]^⊙ = [[η·I, −ε^], [0ᵀ, 0ᵀ]]`.
///
/// The columns follow the homogeneous-coordinate convention, translation
/// first: `exp(ξ^)·q ≈ q + q^⊙·[ρ; φ]`. Use [`swap_twist_halves`] to go from
/// the crate's rotation-first twists.
pub fn point_circdot(q: &Vector4<f64>) -> SMatrix<f64, 4, 6> {
    let eps = q.fixed_rows::<3>(0).into_owned();
    let mut m = SMatrix::<f64, 4, 6>::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * q[3]));
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&eps)));
    m
}

/// `[a; b] -> [b; a]` for 3+3 stacked twists.
pub fn swap_twist_halves(xi: &Twist6) -> Twist6 {
    let mut out = Twist6::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&xi.fixed_rows::<3>(3));
    out.fixed_rows_mut::<3>(3).copy_from(&xi.fixed_rows::<3>(0));
    out
}

/// Permutation matrix realising [`swap_twist_halves`]; it is its own inverse.
pub fn twist_swap_matrix() -> Matrix6<f64> {
    let mut p = Matrix6::zeros();
    p.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    p.fixed_view_mut::<3, 3>(3, 0).copy_from(&Matrix3::identity());
    p
}

pub fn homogeneous(p: &Vector3<f64>) -> Vector4<f64> {
    Vector4::new(p.x, p.y, p.z, 1.0)
}
