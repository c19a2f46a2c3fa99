//! Point-to-plane measurements: local plane fitting, uncertainty-weighted plane
//! covariance, bounded rescaling of residuals, and the per-frame localization
//! weight from the spread of plane normals.

use nalgebra::{DVector, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{skew, Pose3};
use crate::state::{idx, FilterState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlaneError {
    #[error("neighbour covariance trace {trace} is not below the gate {tau}")]
    GatingViolation { trace: f64, tau: f64 },
    #[error("need at least 3 neighbours, got {0}")]
    TooFewPoints(usize),
    #[error("neighbourhood is rank deficient")]
    RankDeficient,
    #[error("neighbour {distance} m off the fitted plane")]
    NotPlanar { distance: f64 },
}

/// Rescaling intervals and the map gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FicParams {
    /// residual divisor range
    pub s: (f64, f64),
    /// measurement noise range
    pub r: (f64, f64),
    /// localization weight range
    pub l: (f64, f64),
    /// normal-spread thresholds
    pub b: (f64, f64),
    pub tau: f64,
}

impl Default for FicParams {
    fn default() -> Self {
        FicParams { s: (1.0, 1.25), r: (0.0075, 0.0125), l: (0.5, 3.0), b: (0.2, 0.8), tau: 1.0 }
    }
}

impl FicParams {
    pub fn is_valid(&self) -> bool {
        [self.s, self.r, self.l, self.b].iter().all(|(lo, hi)| lo < hi) && self.tau > 0.0
    }
}

/// Affine map of `v ∈ [v_min, v_max]` onto `[i_min, i_max]`; a degenerate
/// batch maps to the midpoint.
pub fn fic(v: f64, v_min: f64, v_max: f64, i_max: f64, i_min: f64) -> f64 {
    if v_max <= v_min {
        return 0.5 * (i_max + i_min);
    }
    (i_max - i_min) * (v - v_min) / (v_max - v_min) + i_min
}

/// Weighted sum `Σ w_n²·Σ_n` with `w_n ∝ τ − tr(Σ_n)`.
pub fn plane_covariance(covs: &[Matrix3<f64>], tau: f64) -> Result<(Matrix3<f64>, Vec<f64>), PlaneError> {
    let mut slack = Vec::with_capacity(covs.len());
    for c in covs {
        let tr = c.trace();
        if tr >= tau {
            return Err(PlaneError::GatingViolation { trace: tr, tau });
        }
        slack.push(tau - tr);
    }
    let total: f64 = slack.iter().sum();
    let weights: Vec<f64> = slack.iter().map(|s| s / total).collect();
    let cov = covs.iter().zip(&weights).fold(Matrix3::zeros(), |acc, (c, w)| acc + c * (w * w));
    Ok(((cov + cov.transpose()) * 0.5, weights))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneFit {
    pub normal: Vector3<f64>,
    /// a point on the plane (the centroid)
    pub anchor: Vector3<f64>,
}

impl PlaneFit {
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(&(p - self.anchor))
    }
}

/// Smallest accepted ratio of the middle to the largest scatter eigenvalue.
const MIN_SPREAD_RATIO: f64 = 1e-2;

/// Centroid and scatter eigen-decomposition, eigenvalues ascending.
fn scatter(points: &[Vector3<f64>]) -> (Vector3<f64>, [f64; 3], Matrix3<f64>) {
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let m = points.iter().fold(Matrix3::zeros(), |a, p| {
        let d = p - centroid;
        a + d * d.transpose()
    }) / n;
    let eig = SymmetricEigen::new(m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.map(|i| eig.eigenvalues[i]);
    let vecs = Matrix3::from_columns(&order.map(|i| eig.eigenvectors.column(i).into_owned()));
    (centroid, vals, vecs)
}

/// The spread across the main direction must be a real fraction of the
/// spread along it, otherwise the normal is poorly determined.
fn spans_plane(vals: &[f64; 3]) -> bool {
    vals[2] > 1e-12 && vals[1] >= MIN_SPREAD_RATIO * vals[2]
}

/// Least-squares plane through `points`, accepted only if every point lies
/// within `threshold` of it. Every subset missing one point must still span
/// a plane, which rejects a line of points plus one stray point.
pub fn fit_plane(points: &[Vector3<f64>], threshold: f64) -> Result<PlaneFit, PlaneError> {
    if points.len() < 3 {
        return Err(PlaneError::TooFewPoints(points.len()));
    }
    let (centroid, vals, vecs) = scatter(points);
    if !spans_plane(&vals) {
        return Err(PlaneError::RankDeficient);
    }
    if points.len() > 3 {
        for skip in 0..points.len() {
            let rest: Vec<Vector3<f64>> =
                points.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, p)| *p).collect();
            if !spans_plane(&scatter(&rest).1) {
                return Err(PlaneError::RankDeficient);
            }
        }
    }
    let normal = vecs.column(0).normalize();
    let fit = PlaneFit { normal, anchor: centroid };
    let worst = points.iter().map(|p| fit.signed_distance(p).abs()).fold(0.0, f64::max);
    if worst >= threshold {
        return Err(PlaneError::NotPlanar { distance: worst });
    }
    Ok(fit)
}

/// Where a merged point enters the state: source extrinsic slot, the fixed
/// relative motion from the source arrival to the merge time, and the
/// undistorted point in the source frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointChain {
    pub lidar_slot: usize,
    pub relative: Pose3,
    pub local: Vector3<f64>,
}

impl PointChain {
    /// Point in the IMU frame at the merge time.
    pub fn in_imu(&self, x: &FilterState) -> Vector3<f64> {
        let ext = &x.extrinsics[self.lidar_slot];
        self.relative.transform_point(&ext.transform_point(&self.local))
    }

    pub fn in_world(&self, x: &FilterState) -> Vector3<f64> {
        x.pose().transform_point(&self.in_imu(x))
    }
}

/// `vᵀ(p_w − q)/s` and its Jacobian row with respect to the error state.
pub fn point_to_plane(x: &FilterState, chain: &PointChain, plane: &PlaneFit, s: f64) -> (f64, DVector<f64>) {
    let ext = &x.extrinsics[chain.lidar_slot];
    let p_imu = chain.in_imu(x);
    let p_world = x.pose().transform_point(&p_imu);
    let z = plane.signed_distance(&p_world) / s;

    let r = x.rot.matrix();
    let r_rel = chain.relative.rot.matrix();
    let n_row = plane.normal.transpose() / s;
    let mut h = DVector::zeros(x.dim());
    let mut put = |at: usize, m: Matrix3<f64>| {
        let row = n_row * m;
        h.fixed_rows_mut::<3>(at).copy_from(&row.transpose());
    };
    put(idx::ROT, -r * skew(&p_imu));
    put(idx::POS, Matrix3::identity());
    let r_chain = r * r_rel;
    put(idx::ext_rot(chain.lidar_slot), -r_chain * ext.rot.matrix() * skew(&chain.local));
    put(idx::ext_pos(chain.lidar_slot), r_chain);
    (z, h)
}

/// Smallest over largest singular value of the stacked normals.
pub fn normal_spread(normals: &[Vector3<f64>]) -> f64 {
    let gram = normals.iter().fold(Matrix3::zeros(), |a, n| a + n * n.transpose());
    let ev = SymmetricEigen::new(gram).eigenvalues;
    let max = ev.max();
    if max <= 0.0 {
        return 0.0;
    }
    (ev.min().max(0.0) / max).sqrt()
}

/// Frame weight from the normal spread, clamped to `[l_min, l_max]`.
pub fn localization_weight(normals: &[Vector3<f64>], params: &FicParams) -> f64 {
    let (l_min, l_max) = params.l;
    let (b_min, b_max) = params.b;
    if normals.len() < 3 {
        return l_min;
    }
    let w = normal_spread(normals);
    if w < b_min {
        l_min
    } else if w > b_max {
        l_max
    } else {
        fic(w, b_min, b_max, l_max, l_min)
    }
}
