//! Pose covariance inversion and compounding, and first-order propagation of
//! pose and measurement noise onto individual points.
//!
//! Pose covariances live in the rotation-first twist layout with a left
//! perturbation, `T = exp(ξ^)·T̄`. The fourth-order compounding terms are
//! written in the translation-first layout of the homogeneous-point algebra
//! and permuted at the boundary.

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::lie::{homogeneous, point_circdot, skew, twist_swap_matrix, Pose3};
use crate::scan::TimedPoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseWithCov {
    pub pose: Pose3,
    /// 6×6, `[φ; ρ]`, left perturbation.
    pub cov: Matrix6<f64>,
}

impl PoseWithCov {
    pub fn new(pose: Pose3, cov: Matrix6<f64>) -> Self {
        PoseWithCov { pose, cov }
    }

    pub fn certain(pose: Pose3) -> Self {
        PoseWithCov { pose, cov: Matrix6::zeros() }
    }

    pub fn identity() -> Self {
        Self::certain(Pose3::identity())
    }

    /// Scalar summary used throughout: the covariance trace.
    pub fn trace(&self) -> f64 {
        self.cov.trace()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointWithCov {
    pub xyz: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub lidar_id: usize,
    pub time: f64,
}

pub fn symmetrize6(m: &Matrix6<f64>) -> Matrix6<f64> {
    (m + m.transpose()) * 0.5
}

pub fn symmetrize3(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// Nearest positive semi-definite matrix (negative eigenvalues clipped).
pub fn project_psd6(m: &Matrix6<f64>) -> Matrix6<f64> {
    let eig = SymmetricEigen::new(symmetrize6(m));
    let d = eig.eigenvalues.map(|x| x.max(0.0));
    symmetrize6(&(eig.eigenvectors * Matrix6::from_diagonal(&d) * eig.eigenvectors.transpose()))
}

/// Converts the pose block of a filter covariance (right-perturbed rotation,
/// additive translation) into a left-perturbed pose covariance.
pub fn state_pose_block_to_left(pose: &Pose3, block: &Matrix6<f64>) -> Matrix6<f64> {
    let r = pose.rot.matrix();
    let mut g = Matrix6::identity();
    g.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    g.fixed_view_mut::<3, 3>(3, 0).copy_from(&(skew(&pose.trans) * r));
    symmetrize6(&(g * block * g.transpose()))
}

pub fn invert_with_cov(p: &PoseWithCov) -> PoseWithCov {
    let inv = p.pose.inverse();
    let ad = inv.adjoint();
    PoseWithCov::new(inv, symmetrize6(&(ad * p.cov * ad.transpose())))
}

/// `⟨⟨A⟩⟩ = −tr(A)·I + A`
fn dd(a: &Matrix3<f64>) -> Matrix3<f64> {
    a - Matrix3::identity() * a.trace()
}

/// `⟨⟨A, B⟩⟩ = ⟨⟨A⟩⟩⟨⟨B⟩⟩ + ⟨⟨BA⟩⟩`
fn dd2(a: &Matrix3<f64>, b: &Matrix3<f64>) -> Matrix3<f64> {
    dd(a) * dd(b) + dd(&(b * a))
}

struct Blocks {
    rr: Matrix3<f64>,
    rp: Matrix3<f64>,
    pp: Matrix3<f64>,
}

/// Splits a translation-first covariance.
fn blocks(s: &Matrix6<f64>) -> Blocks {
    Blocks {
        rr: s.fixed_view::<3, 3>(0, 0).into_owned(),
        rp: s.fixed_view::<3, 3>(0, 3).into_owned(),
        pp: s.fixed_view::<3, 3>(3, 3).into_owned(),
    }
}

fn a_matrix(b: &Blocks) -> Matrix6<f64> {
    let mut a = Matrix6::zeros();
    let pp = dd(&b.pp);
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&pp);
    a.fixed_view_mut::<3, 3>(3, 3).copy_from(&pp);
    a.fixed_view_mut::<3, 3>(0, 3).copy_from(&dd(&(b.rp + b.rp.transpose())));
    a
}

/// Second-order compounding: `Σ_a + Ad(a)·Σ_b·Ad(a)ᵀ`.
pub fn compound_second_order(a: &PoseWithCov, b: &PoseWithCov) -> PoseWithCov {
    let ad = a.pose.adjoint();
    PoseWithCov::new(a.pose * b.pose, symmetrize6(&(a.cov + ad * b.cov * ad.transpose())))
}

/// Compounds two independent uncertain poses, keeping the fourth-order terms
/// of the covariance expansion.
pub fn compound(a: &PoseWithCov, b: &PoseWithCov) -> PoseWithCov {
    let ad = a.pose.adjoint();
    let swap = twist_swap_matrix();
    let s1 = swap * a.cov * swap;
    let s2 = swap * (ad * b.cov * ad.transpose()) * swap;
    let (b1, b2) = (blocks(&s1), blocks(&s2));
    let a1 = a_matrix(&b1);
    let a2 = a_matrix(&b2);

    let brr = dd2(&b1.pp, &b2.rr)
        + dd2(&b1.rp.transpose(), &b2.rp)
        + dd2(&b1.rp, &b2.rp.transpose())
        + dd2(&b1.rr, &b2.pp);
    let brp = dd2(&b1.pp, &b2.rp.transpose()) + dd2(&b1.rp.transpose(), &b2.pp);
    let bpp = dd2(&b1.pp, &b2.pp);
    let mut bm = Matrix6::zeros();
    bm.fixed_view_mut::<3, 3>(0, 0).copy_from(&brr);
    bm.fixed_view_mut::<3, 3>(0, 3).copy_from(&brp);
    bm.fixed_view_mut::<3, 3>(3, 0).copy_from(&brp.transpose());
    bm.fixed_view_mut::<3, 3>(3, 3).copy_from(&bpp);

    let fourth = (a1 * s2 + s2 * a1.transpose() + a2 * s1 + s1 * a2.transpose()) / 12.0 + bm / 4.0;
    let total = s1 + s2 + fourth;
    PoseWithCov::new(a.pose * b.pose, symmetrize6(&(swap * total * swap)))
}

/// Uncertainty of the chain `T_IP⁻¹ · ᴮT_{IⁱIʲ} · T_IS` carrying a point of
/// LiDAR S at its acquisition time into the frame of LiDAR P at the merge time.
pub fn acquisition_uncertainty(
    extrinsic_p: &PoseWithCov,
    relative: &PoseWithCov,
    extrinsic_s: &PoseWithCov,
) -> PoseWithCov {
    compound(&compound(&invert_with_cov(extrinsic_p), relative), extrinsic_s)
}

/// First-order covariance of `T·(p + Dζ)` with `ξ ~ N(0, Σ_T)`, `ζ ~ N(0, Z)`.
///
/// Returns the transformed point with the upper-left 3×3 of `QΞQᵀ`, where
/// `Q = [(Tp)^⊙  T·D]`, `D = [I₃; 0ᵀ]`.
pub fn point_covariance(t: &PoseWithCov, p: &TimedPoint, z: &Matrix3<f64>) -> PointWithCov {
    let q = t.pose.transform_point(&p.xyz);
    let circ = point_circdot(&homogeneous(&q)).fixed_view::<3, 6>(0, 0).into_owned();
    let swap = twist_swap_matrix();
    let pose_term = circ * (swap * t.cov * swap) * circ.transpose();
    let r = t.pose.rot.matrix();
    let meas_term = r * z * r.transpose();
    PointWithCov { xyz: q, cov: symmetrize3(&(pose_term + meas_term)), lidar_id: p.lidar_id, time: p.time }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{Rot3, Twist6};
    use nalgebra::{Cholesky, Vector6};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn sample_twist(rng: &mut ChaCha8Rng, chol: &Matrix6<f64>) -> Twist6 {
        let n = Vector6::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        chol * n
    }

    fn random_spd(rng: &mut ChaCha8Rng, sigma: f64) -> Matrix6<f64> {
        let a = Matrix6::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let m = a * a.transpose() / 6.0 + Matrix6::identity() * 0.5;
        // scale so the average diagonal is sigma²
        m * (sigma * sigma / (m.trace() / 6.0))
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose3 {
        let w = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let t = Vector3::from_fn(|_, _| rng.gen_range(-2.0..2.0));
        Pose3::new(Rot3::exp(&w), t)
    }

    fn sample_cov(samples: &[Twist6]) -> Matrix6<f64> {
        let n = samples.len() as f64;
        let mean = samples.iter().fold(Twist6::zeros(), |a, s| a + s) / n;
        samples.iter().fold(Matrix6::zeros(), |a, s| a + (s - mean) * (s - mean).transpose()) / (n - 1.0)
    }

    fn perturbed(rng: &mut ChaCha8Rng, p: &PoseWithCov) -> Pose3 {
        let l = Cholesky::new(p.cov).unwrap().l();
        Pose3::exp(&sample_twist(rng, &l)) * p.pose
    }

    fn rel_frobenius(a: &Matrix6<f64>, b: &Matrix6<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn invert_identity_keeps_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let cov = random_spd(&mut rng, 0.1);
        let out = invert_with_cov(&PoseWithCov::new(Pose3::identity(), cov));
        assert!((out.cov - cov).norm() < 1e-15);
    }

    #[test]
    fn invert_pure_rotation_isotropic() {
        let cov = Matrix6::identity() * 0.01;
        let p = PoseWithCov::new(Pose3::new(Rot3::exp(&Vector3::new(0.3, -1.0, 0.2)), Vector3::zeros()), cov);
        assert!((invert_with_cov(&p).cov - cov).norm() < 1e-15);
    }

    #[test]
    fn invert_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = PoseWithCov::new(random_pose(&mut rng), random_spd(&mut rng, 0.02));
        let inv = invert_with_cov(&p);
        let samples: Vec<Twist6> = (0..100_000)
            .map(|_| (perturbed(&mut rng, &p).inverse() * inv.pose.inverse()).log().unwrap())
            .collect();
        let mc = sample_cov(&samples);
        assert!(rel_frobenius(&inv.cov, &mc) < 0.05, "{}", rel_frobenius(&inv.cov, &mc));
    }

    #[test]
    fn compound_with_certain_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a = PoseWithCov::new(random_pose(&mut rng), random_spd(&mut rng, 0.05));
        let out = compound(&a, &PoseWithCov::identity());
        assert_eq!(out.pose, a.pose);
        assert!((out.cov - a.cov).norm() < 1e-15);
    }

    #[test]
    fn fourth_order_correction_is_small() {
        let s = 0.01;
        let a = PoseWithCov::new(Pose3::identity(), Matrix6::identity() * s * s);
        let out = compound(&a, &a);
        let correction = out.cov - Matrix6::identity() * 2.0 * s * s;
        assert!(correction.amax() > 0.0);
        assert!(correction.amax() < 0.01 * 2.0 * s * s);
    }

    fn chain_monte_carlo(rng: &mut ChaCha8Rng, chain: &[PoseWithCov], n: usize) -> Matrix6<f64> {
        let mean = chain.iter().skip(1).fold(chain[0].pose, |acc, p| acc * p.pose);
        let samples: Vec<Twist6> = (0..n)
            .map(|_| {
                let t = chain.iter().skip(1).fold(perturbed(rng, &chain[0]), |acc, p| acc * perturbed(rng, p));
                (t * mean.inverse()).log().unwrap()
            })
            .collect();
        sample_cov(&samples)
    }

    #[test]
    fn compound_chain_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let chain: Vec<PoseWithCov> =
            (0..3).map(|_| PoseWithCov::new(random_pose(&mut rng), random_spd(&mut rng, 0.05))).collect();
        let analytic = compound(&compound(&chain[0], &chain[1]), &chain[2]);
        let mc = chain_monte_carlo(&mut rng, &chain, 100_000);
        let err = rel_frobenius(&analytic.cov, &mc);
        assert!(err < 0.10, "relative error {err}");
    }

    #[test]
    fn fourth_order_beats_second_order_for_large_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut cov = Matrix6::identity() * 0.04;
        cov.fixed_view_mut::<3, 3>(3, 3).copy_from(&(Matrix3::identity() * 0.25));
        let a = PoseWithCov::new(Pose3::new(Rot3::exp(&Vector3::new(0.2, 0.1, -0.3)), Vector3::new(1.0, 2.0, 0.5)), cov);
        let b = PoseWithCov::new(Pose3::new(Rot3::exp(&Vector3::new(-0.4, 0.0, 0.2)), Vector3::new(0.0, -1.0, 2.0)), cov);
        let mc = chain_monte_carlo(&mut rng, &[a, b], 200_000);
        let e4 = rel_frobenius(&compound(&a, &b).cov, &mc);
        let e2 = rel_frobenius(&compound_second_order(&a, &b).cov, &mc);
        assert!(e4 < e2, "fourth {e4} second {e2}");
    }

    #[test]
    fn point_covariance_identity_gives_z() {
        let z = Matrix3::from_diagonal(&Vector3::new(0.05, 0.05, 0.05));
        let p = TimedPoint::new(Vector3::new(3.0, -2.0, 1.0), 0.0, 0);
        let out = point_covariance(&PoseWithCov::identity(), &p, &z);
        assert_eq!(out.cov, z);
        assert_eq!(out.xyz, p.xyz);
    }

    #[test]
    fn origin_point_ignores_rotation_uncertainty() {
        let mut cov = Matrix6::zeros();
        cov.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * 0.01));
        let t = PoseWithCov::new(Pose3::identity(), cov);
        let out = point_covariance(&t, &TimedPoint::new(Vector3::zeros(), 0.0, 0), &Matrix3::zeros());
        assert_eq!(out.cov, Matrix3::zeros());
    }

    #[test]
    fn rotational_contribution_scales_with_range_squared() {
        let mut cov = Matrix6::zeros();
        cov.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::from_diagonal(&Vector3::new(1e-4, 2e-4, 3e-4)));
        let t = PoseWithCov::new(Pose3::new(Rot3::exp(&Vector3::new(0.1, 0.2, 0.3)), Vector3::zeros()), cov);
        let z = Matrix3::zeros();
        let p = Vector3::new(4.0, 1.0, -2.0);
        let near = point_covariance(&t, &TimedPoint::new(p, 0.0, 0), &z).cov.trace();
        let far = point_covariance(&t, &TimedPoint::new(2.0 * p, 0.0, 0), &z).cov.trace();
        assert!((far / near - 4.0).abs() < 1e-12);
    }

    #[test]
    fn point_covariance_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let t = PoseWithCov::new(random_pose(&mut rng), random_spd(&mut rng, 0.03));
        let z = Matrix3::from_diagonal(&Vector3::new(0.01, 0.02, 0.015));
        let p = TimedPoint::new(Vector3::new(6.0, -3.0, 2.0), 0.0, 1);
        let analytic = point_covariance(&t, &p, &z);
        let lz = Cholesky::new(z).unwrap().l();
        let n = 100_000;
        let pts: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                let zeta = lz * Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                perturbed(&mut rng, &t).transform_point(&(p.xyz + zeta))
            })
            .collect();
        let mean = pts.iter().fold(Vector3::zeros(), |a, x| a + x) / n as f64;
        let mc = pts.iter().fold(Matrix3::zeros(), |a, x| a + (x - mean) * (x - mean).transpose()) / (n as f64 - 1.0);
        let err = (analytic.cov - mc).norm() / mc.norm();
        assert!(err < 0.10, "relative error {err}");
    }

    #[test]
    fn left_conversion_matches_perturbation() {
        // R = R̄·exp(δθ), t = t̄ + δt  ==  exp(ξ)·T̄ with ξ = G·[δθ; δt]
        let pose = Pose3::new(Rot3::exp(&Vector3::new(0.5, -0.2, 0.7)), Vector3::new(2.0, -1.0, 3.0));
        let d = Vector6::new(1e-6, -2e-6, 3e-6, 4e-6, 1e-6, -1e-6);
        let moved = Pose3::new(pose.rot.plus(&d.fixed_rows::<3>(0).into_owned()), pose.trans + d.fixed_rows::<3>(3));
        let xi = (moved * pose.inverse()).log().unwrap();
        let block = d * d.transpose();
        let conv = state_pose_block_to_left(&pose, &block);
        let expected = xi * xi.transpose();
        assert!((conv - expected).norm() < 1e-5 * expected.norm());
    }

    #[test]
    fn psd_projection_clips() {
        let m = Matrix6::from_diagonal(&Vector6::new(1.0, -1e-3, 2.0, 0.0, 0.5, -5.0));
        let p = project_psd6(&m);
        assert!(SymmetricEigen::new(p).eigenvalues.min() >= -1e-15);
        assert!((p[(0, 0)] - 1.0).abs() < 1e-12);
    }
}
