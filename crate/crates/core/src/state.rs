//! The filter state manifold `SO(3) × R^15 × (SO(3) × R^3)^N` and its ⊞/⊟.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{right_jacobian_inv, Pose3, Rot3};

/// Stacked error-state vector of dimension `18 + 6N`.
pub type TangentVec = DVector<f64>;

/// Symmetric `(18+6N)²` covariance in the tangent space of [`FilterState`].
pub type StateCov = DMatrix<f64>;

/// Offsets of the blocks inside a [`TangentVec`].
pub mod idx {
    pub const ROT: usize = 0;
    pub const POS: usize = 3;
    pub const VEL: usize = 6;
    pub const BG: usize = 9;
    pub const BA: usize = 12;
    pub const GRAV: usize = 15;
    /// First extrinsic block; LiDAR `i` occupies `EXT + 6i .. EXT + 6i + 6`
    /// (rotation then translation).
    pub const EXT: usize = 18;

    pub const fn ext_rot(i: usize) -> usize {
        EXT + 6 * i
    }
    pub const fn ext_pos(i: usize) -> usize {
        EXT + 6 * i + 3
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("tangent vector has dimension {got}, state expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("states carry {0} and {1} extrinsics")]
    LidarCountMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    /// `R_GI`
    pub rot: Rot3,
    /// `t_GI` (m)
    pub pos: Vector3<f64>,
    /// `v_GI` (m/s)
    pub vel: Vector3<f64>,
    /// gyro bias (rad/s)
    pub bias_gyro: Vector3<f64>,
    /// accelerometer bias (m/s²)
    pub bias_acc: Vector3<f64>,
    /// gravity in the world frame (m/s²)
    pub gravity: Vector3<f64>,
    /// `T_IL_i`, one per LiDAR
    pub extrinsics: Vec<Pose3>,
}

impl FilterState {
    pub fn new(extrinsics: Vec<Pose3>) -> Self {
        FilterState {
            rot: Rot3::identity(),
            pos: Vector3::zeros(),
            vel: Vector3::zeros(),
            bias_gyro: Vector3::zeros(),
            bias_acc: Vector3::zeros(),
            gravity: Vector3::new(0.0, 0.0, -9.81),
            extrinsics,
        }
    }

    pub fn num_lidars(&self) -> usize {
        self.extrinsics.len()
    }

    pub fn dim(&self) -> usize {
        idx::EXT + 6 * self.extrinsics.len()
    }

    pub fn pose(&self) -> Pose3 {
        Pose3::new(self.rot, self.pos)
    }

    pub fn set_pose(&mut self, pose: &Pose3) {
        self.rot = pose.rot;
        self.pos = pose.trans;
    }

    /// Rotations are perturbed on the right, vectors additively.
    pub fn boxplus(&self, delta: &TangentVec) -> Result<Self, StateError> {
        if delta.len() != self.dim() {
            return Err(StateError::DimensionMismatch { expected: self.dim(), got: delta.len() });
        }
        let v3 = |at: usize| Vector3::new(delta[at], delta[at + 1], delta[at + 2]);
        let extrinsics = self
            .extrinsics
            .iter()
            .enumerate()
            .map(|(i, e)| Pose3::new(e.rot.plus(&v3(idx::ext_rot(i))), e.trans + v3(idx::ext_pos(i))))
            .collect();
        Ok(FilterState {
            rot: self.rot.plus(&v3(idx::ROT)),
            pos: self.pos + v3(idx::POS),
            vel: self.vel + v3(idx::VEL),
            bias_gyro: self.bias_gyro + v3(idx::BG),
            bias_acc: self.bias_acc + v3(idx::BA),
            gravity: self.gravity + v3(idx::GRAV),
            extrinsics,
        })
    }

    /// `self ⊟ other`, the exact inverse of [`FilterState::boxplus`].
    pub fn boxminus(&self, other: &FilterState) -> Result<TangentVec, StateError> {
        if self.num_lidars() != other.num_lidars() {
            return Err(StateError::LidarCountMismatch(self.num_lidars(), other.num_lidars()));
        }
        let mut d = TangentVec::zeros(self.dim());
        let mut put = |at: usize, v: Vector3<f64>| d.fixed_rows_mut::<3>(at).copy_from(&v);
        put(idx::ROT, self.rot.minus(&other.rot));
        put(idx::POS, self.pos - other.pos);
        put(idx::VEL, self.vel - other.vel);
        put(idx::BG, self.bias_gyro - other.bias_gyro);
        put(idx::BA, self.bias_acc - other.bias_acc);
        put(idx::GRAV, self.gravity - other.gravity);
        for (i, (a, b)) in self.extrinsics.iter().zip(&other.extrinsics).enumerate() {
            put(idx::ext_rot(i), a.rot.minus(&b.rot));
            put(idx::ext_pos(i), a.trans - b.trans);
        }
        Ok(d)
    }
}

/// What the iterated filter needs from a state space.
pub trait Manifold: Clone {
    fn tangent_dim(&self) -> usize;
    /// `self ⊞ delta`. Panics on a dimension mismatch.
    fn plus(&self, delta: &DVector<f64>) -> Self;
    /// `self ⊟ other`.
    fn minus(&self, other: &Self) -> DVector<f64>;
    /// Jacobian of `(self ⊞ x̃) ⊟ anchor` with respect to `x̃` at `x̃ = 0`.
    fn minus_jacobian(&self, anchor: &Self) -> DMatrix<f64>;
}

impl Manifold for FilterState {
    fn tangent_dim(&self) -> usize {
        self.dim()
    }

    fn plus(&self, delta: &DVector<f64>) -> Self {
        self.boxplus(delta).expect("tangent dimension")
    }

    fn minus(&self, other: &Self) -> DVector<f64> {
        self.boxminus(other).expect("lidar count")
    }

    /// Identity on vector blocks, `Jr⁻¹(self ⊟ anchor)` on rotation blocks.
    fn minus_jacobian(&self, anchor: &Self) -> DMatrix<f64> {
        let n = self.dim();
        let mut j = DMatrix::identity(n, n);
        let mut set_rot = |at: usize, a: &Rot3, b: &Rot3| {
            let block: Matrix3<f64> = right_jacobian_inv(&a.minus(b));
            j.fixed_view_mut::<3, 3>(at, at).copy_from(&block);
        };
        set_rot(idx::ROT, &self.rot, &anchor.rot);
        for (i, (a, b)) in self.extrinsics.iter().zip(&anchor.extrinsics).enumerate() {
            set_rot(idx::ext_rot(i), &a.rot, &b.rot);
        }
        j
    }
}

/// Plain Euclidean space, handy for linear-Gaussian checks of the filter.
impl Manifold for DVector<f64> {
    fn tangent_dim(&self) -> usize {
        self.len()
    }

    fn plus(&self, delta: &DVector<f64>) -> Self {
        self + delta
    }

    fn minus(&self, other: &Self) -> DVector<f64> {
        self - other
    }

    fn minus_jacobian(&self, _anchor: &Self) -> DMatrix<f64> {
        DMatrix::identity(self.len(), self.len())
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use rand::Rng;

    pub fn random_state<R: Rng>(rng: &mut R, n_lidars: usize) -> FilterState {
        let mut v3 = |s: f64| Vector3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s));
        let rot = Rot3::exp(&v3(2.0));
        let pos = v3(10.0);
        let vel = v3(3.0);
        let bias_gyro = v3(0.05);
        let bias_acc = v3(0.2);
        let gravity = Vector3::new(0.0, 0.0, -9.81) + v3(0.1);
        let extrinsics = (0..n_lidars).map(|_| Pose3::new(Rot3::exp(&v3(1.5)), v3(1.0))).collect();
        FilterState { rot, pos, vel, bias_gyro, bias_acc, gravity, extrinsics }
    }

    pub fn random_tangent<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> TangentVec {
        TangentVec::from_fn(dim, |_, _| rng.gen_range(-scale..scale))
    }
}
