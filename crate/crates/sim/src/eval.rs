//! Trajectory error metrics: absolute error after rigid alignment and
//! relative error over fixed travelled distances.

use ctlio_core::lie::{Pose3, Rot3};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("only {0} poses overlap in time; need at least 2")]
    NoOverlap(usize),
    #[error("timestamps must be strictly increasing")]
    Unordered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// RMSE of position error after alignment (m)
    #[serde(rename = "ATE_t")]
    pub ate_t: f64,
    /// RMSE of rotation error after alignment (deg)
    #[serde(rename = "ATE_r")]
    pub ate_r: f64,
    /// RMSE of relative translation error per distance (%)
    #[serde(rename = "RTE_t")]
    pub rte_t: f64,
    /// RMSE of relative rotation error per distance (deg/m)
    #[serde(rename = "RTE_r")]
    pub rte_r: f64,
}

pub type Stamped = (f64, Pose3);

/// Second over first singular value of the position cross-covariance below
/// which the path counts as a straight line.
const LINE_RATIO: f64 = 1e-2;

fn check_order(traj: &[Stamped]) -> Result<(), EvalError> {
    if traj.windows(2).all(|w| w[1].0 > w[0].0) {
        Ok(())
    } else {
        Err(EvalError::Unordered)
    }
}

/// Half the median gap between consecutive estimate stamps.
pub fn tolerance(est: &[Stamped]) -> f64 {
    let mut gaps: Vec<f64> = est.windows(2).map(|w| w[1].0 - w[0].0).collect();
    if gaps.is_empty() {
        return f64::INFINITY;
    }
    gaps.sort_by(f64::total_cmp);
    0.5 * gaps[gaps.len() / 2]
}

/// Estimate poses paired with the truth pose nearest in time, within
/// the tolerance.
pub fn associate(est: &[Stamped], truth: &[Stamped]) -> Result<Vec<(Pose3, Pose3)>, EvalError> {
    check_order(est)?;
    check_order(truth)?;
    let tol = tolerance(est);
    let mut pairs = Vec::new();
    let mut j = 0;
    for (t, pe) in est {
        while j + 1 < truth.len() && (truth[j + 1].0 - t).abs() <= (truth[j].0 - t).abs() {
            j += 1;
        }
        if let Some((tt, pt)) = truth.get(j) {
            if (tt - t).abs() <= tol {
                pairs.push((*pe, *pt));
            }
        }
    }
    if pairs.len() < 2 {
        return Err(EvalError::NoOverlap(pairs.len()));
    }
    Ok(pairs)
}

/// Rigid transform `A` minimising `Σ‖p_truth − A·p_est‖²`. When the
/// positions lie on a line the spin about that line is taken from the mean
/// orientation error instead.
pub fn align_rigid(pairs: &[(Pose3, Pose3)]) -> Pose3 {
    let n = pairs.len() as f64;
    let mu_e = pairs.iter().map(|(e, _)| e.trans).sum::<Vector3<f64>>() / n;
    let mu_t = pairs.iter().map(|(_, t)| t.trans).sum::<Vector3<f64>>() / n;
    let h = pairs
        .iter()
        .fold(Matrix3::zeros(), |acc, (e, t)| acc + (e.trans - mu_e) * (t.trans - mu_t).transpose());
    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    let mut rot = if sv[0] < 1e-12 {
        // positions do not pin the rotation; use the first orientation pair
        pairs[0].1.rot * pairs[0].0.rot.inverse()
    } else {
        let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
        let v = v_t.transpose();
        let mut d = Matrix3::identity();
        d[(2, 2)] = (v * u.transpose()).determinant().signum();
        Rot3::from_matrix(&(v * d * u.transpose()))
    };
    if sv[0] >= 1e-12 && sv[1] < LINE_RATIO * sv[0] {
        let axis = svd.v_t.expect("v_t").row(0).transpose().normalize();
        let mean = pairs.iter().map(|(e, t)| (t.rot * (rot * e.rot).inverse()).log()).sum::<Vector3<f64>>() / n;
        rot = Rot3::exp(&(axis * axis.dot(&mean))) * rot;
    }
    Pose3::new(rot, mu_t - rot.act(&mu_e))
}

/// `(ATE_t m, ATE_r deg)` after rigid alignment.
pub fn ate(est: &[Stamped], truth: &[Stamped]) -> Result<(f64, f64), EvalError> {
    let pairs = associate(est, truth)?;
    let a = align_rigid(&pairs);
    let n = pairs.len() as f64;
    let (mut st, mut sr) = (0.0, 0.0);
    for (e, t) in &pairs {
        let aligned = a * *e;
        st += (aligned.trans - t.trans).norm_squared();
        sr += (t.rot.inverse() * aligned.rot).angle().to_degrees().powi(2);
    }
    Ok(((st / n).sqrt(), (sr / n).sqrt()))
}

/// `(RTE_t %, RTE_r deg/m)` over segments whose true path length first
/// reaches `delta`; zero when the path never gets that long.
pub fn rte(est: &[Stamped], truth: &[Stamped], delta: f64) -> Result<(f64, f64), EvalError> {
    let pairs = associate(est, truth)?;
    let mut arc = vec![0.0];
    for w in pairs.windows(2) {
        let last = *arc.last().expect("non-empty");
        arc.push(last + (w[1].1.trans - w[0].1.trans).norm());
    }
    let (mut st, mut sr, mut count) = (0.0, 0.0, 0usize);
    let mut j = 0;
    for i in 0..pairs.len() {
        j = j.max(i + 1);
        while j < pairs.len() && arc[j] - arc[i] < delta {
            j += 1;
        }
        if j >= pairs.len() {
            break;
        }
        let len = arc[j] - arc[i];
        let rel_t = pairs[i].1.inverse() * pairs[j].1;
        let rel_e = pairs[i].0.inverse() * pairs[j].0;
        let err = rel_t.inverse() * rel_e;
        st += (err.trans.norm() / len * 100.0).powi(2);
        sr += (err.rot.angle().to_degrees() / len).powi(2);
        count += 1;
    }
    if count == 0 {
        return Ok((0.0, 0.0));
    }
    Ok(((st / count as f64).sqrt(), (sr / count as f64).sqrt()))
}

pub fn evaluate(est: &[Stamped], truth: &[Stamped], delta: f64) -> Result<Metrics, EvalError> {
    let (ate_t, ate_r) = ate(est, truth)?;
    let (rte_t, rte_r) = rte(est, truth, delta)?;
    Ok(Metrics { ate_t, ate_r, rte_t, rte_r })
}
