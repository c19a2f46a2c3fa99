//! Randomised invariants of the evaluation metrics and the ray caster.

use ctlio_core::lie::{Pose3, Rot3};
use ctlio_sim::eval::{ate, rte};
use ctlio_sim::world::{cast, Rect};
use nalgebra::Vector3;
use proptest::prelude::*;

fn vec3(s: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-s..s, -s..s, -s..s).prop_map(|(a, b, c)| Vector3::new(a, b, c))
}

fn pose(rot: f64, trans: f64) -> impl Strategy<Value = Pose3> {
    (vec3(rot), vec3(trans)).prop_map(|(w, t)| Pose3::new(Rot3::exp(&w), t))
}

/// A wandering path with per-pose jitter added to the estimate.
fn paths() -> impl Strategy<Value = (Vec<(f64, Pose3)>, Vec<(f64, Pose3)>)> {
    prop::collection::vec((pose(0.3, 1.0), pose(0.01, 0.05)), 5..40).prop_map(|steps| {
        let mut at = Pose3::identity();
        let mut truth = Vec::new();
        let mut est = Vec::new();
        for (k, (step, noise)) in steps.into_iter().enumerate() {
            at = at * step;
            truth.push((k as f64 * 0.1, at));
            est.push((k as f64 * 0.1, at * noise));
        }
        (est, truth)
    })
}

proptest! {
    #[test]
    fn ate_ignores_a_rigid_pre_transform((est, truth) in paths(), g in pose(3.0, 20.0)) {
        let moved: Vec<(f64, Pose3)> = est.iter().map(|(t, p)| (*t, g * *p)).collect();
        let (a, b) = (ate(&est, &truth).unwrap(), ate(&moved, &truth).unwrap());
        prop_assert!((a.0 - b.0).abs() < 1e-6, "{:?} vs {:?}", a, b);
        prop_assert!((a.1 - b.1).abs() < 1e-4, "{:?} vs {:?}", a, b);
        let (c, d) = (rte(&est, &truth, 1.0).unwrap(), rte(&moved, &truth, 1.0).unwrap());
        prop_assert!((c.0 - d.0).abs() < 1e-6 && (c.1 - d.1).abs() < 1e-6);
    }

    #[test]
    fn metrics_are_non_negative((est, truth) in paths()) {
        let (t, r) = ate(&est, &truth).unwrap();
        prop_assert!(t >= 0.0 && r >= 0.0);
        let (t, r) = rte(&est, &truth, 0.5).unwrap();
        prop_assert!(t >= 0.0 && r >= 0.0);
    }

    #[test]
    fn hits_satisfy_their_plane(
        centre in vec3(5.0),
        n in vec3(1.0),
        origin in vec3(8.0),
        target in (-1.0f64..1.0, -1.0f64..1.0),
    ) {
        prop_assume!(n.norm() > 0.1);
        let n = n.normalize();
        let u = n.cross(&Vector3::new(0.3, 0.5, 0.7)).normalize() * 3.0;
        let v = n.cross(&u).normalize() * 2.0;
        let rect = Rect::new(centre, u, v);
        let aim = centre + u * target.0 + v * target.1;
        prop_assume!(rect.plane_distance(&origin).abs() > 1e-3);
        let dir = (aim - origin).normalize();
        let hit = cast(std::slice::from_ref(&rect), &origin, &dir, 100.0);
        prop_assert!(hit.is_some());
        let (range, id) = hit.unwrap();
        prop_assert_eq!(id, 0);
        prop_assert!(rect.plane_distance(&(origin + dir * range)).abs() < 1e-9);
        prop_assert!((range - (aim - origin).norm()).abs() < 1e-9);
    }
}
