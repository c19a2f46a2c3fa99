//! Cumulative cubic B-spline over IMU-rate control poses, plus the knot buffer
//! that owns those poses and answers pose queries at arbitrary times.

use nalgebra::{Matrix6, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{LieError, Pose3, Rot3, Twist6};
use crate::uncertainty::PoseWithCov;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("time {t} outside the available window [{start}, {end})")]
    OutOfWindow { t: f64, start: f64, end: f64 },
    #[error("control points are not uniformly spaced")]
    NonUniformKnots,
    #[error(transparent)]
    Lie(#[from] LieError),
}

/// Cumulative basis weights `(B̃₁, B̃₂, B̃₃)` at phase `s ∈ [0, 1)`.
pub fn cumulative_basis(s: f64) -> [f64; 3] {
    let s2 = s * s;
    let s3 = s2 * s;
    [(5.0 + 3.0 * s - 3.0 * s2 + s3) / 6.0, (1.0 + 3.0 * s + 3.0 * s2 - 2.0 * s3) / 6.0, s3 / 6.0]
}

/// `log(T_a⁻¹·T_b)`.
pub fn incremental_pose(a: &Pose3, b: &Pose3) -> Result<Twist6, SplineError> {
    Ok((a.inverse() * *b).log()?)
}

/// Four consecutive control poses; the interpolation interval is between the
/// second and third knot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlWindow {
    pub poses: [PoseWithCov; 4],
    pub knot_times: [f64; 4],
    /// index of the knot opening the interval
    pub k: i64,
}

impl ControlWindow {
    pub fn new(poses: [PoseWithCov; 4], knot_times: [f64; 4], k: i64) -> Result<Self, SplineError> {
        let dt = knot_times[1] - knot_times[0];
        let uniform = dt > 0.0 && knot_times.windows(2).all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-9 * dt);
        if !uniform {
            return Err(SplineError::NonUniformKnots);
        }
        Ok(ControlWindow { poses, knot_times, k })
    }

    pub fn spacing(&self) -> f64 {
        self.knot_times[1] - self.knot_times[0]
    }

    pub fn start(&self) -> f64 {
        self.knot_times[1]
    }

    pub fn end(&self) -> f64 {
        self.knot_times[2]
    }

    /// The three incremental twists `Ω_k, Ω_{k+1}, Ω_{k+2}`.
    pub fn increments(&self) -> Result<[Twist6; 3], SplineError> {
        let p = &self.poses;
        Ok([
            incremental_pose(&p[0].pose, &p[1].pose)?,
            incremental_pose(&p[1].pose, &p[2].pose)?,
            incremental_pose(&p[2].pose, &p[3].pose)?,
        ])
    }

    fn phase(&self, t: f64) -> Result<f64, SplineError> {
        let mut s = (t - self.start()) / self.spacing();
        if (-1e-9..0.0).contains(&s) {
            s = 0.0;
        }
        if !(0.0..1.0).contains(&s) {
            return Err(SplineError::OutOfWindow { t, start: self.start(), end: self.end() });
        }
        Ok(s)
    }
}

fn evaluate(base: &Pose3, omegas: &[Twist6; 3], s: f64) -> Pose3 {
    let b = cumulative_basis(s);
    *base * Pose3::exp(&(omegas[0] * b[0])) * Pose3::exp(&(omegas[1] * b[1])) * Pose3::exp(&(omegas[2] * b[2]))
}

/// Pose at `t ∈ [t_k, t_{k+1})`; the covariance is the one held by the
/// interval's right knot.
pub fn interpolate(window: &ControlWindow, t: f64) -> Result<PoseWithCov, SplineError> {
    let s = window.phase(t)?;
    let pose = evaluate(&window.poses[0].pose, &window.increments()?, s);
    Ok(PoseWithCov::new(pose, window.poses[2].cov))
}

/// Anything that can report the IMU pose at a time.
pub trait PoseSource {
    fn pose_at(&self, t: f64) -> Result<Pose3, SplineError>;

    /// `T(t_a)⁻¹·T(t_b)`.
    fn relative_pose(&self, t_a: f64, t_b: f64) -> Result<Pose3, SplineError> {
        Ok(self.pose_at(t_a)?.inverse() * self.pose_at(t_b)?)
    }
}

/// One IMU-rate control point: the propagated pose with everything needed to
/// continue the motion inside the following interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub t: f64,
    pub pose: PoseWithCov,
    /// world-frame velocity
    pub vel: Vector3<f64>,
    /// world-frame acceleration applied over the following interval
    pub acc: Vector3<f64>,
    /// bias-corrected body rate over the following interval
    pub gyro: Vector3<f64>,
    /// accumulated pose-block covariance growth, rotation-first, right
    /// perturbation on rotation
    pub growth: Matrix6<f64>,
}

impl Knot {
    pub fn at_rest(t: f64, pose: Pose3) -> Self {
        Knot {
            t,
            pose: PoseWithCov::certain(pose),
            vel: Vector3::zeros(),
            acc: Vector3::zeros(),
            gyro: Vector3::zeros(),
            growth: Matrix6::zeros(),
        }
    }

    /// Partial discrete step of length `tau` from this knot.
    pub fn advance(&self, tau: f64) -> Pose3 {
        let rot = self.pose.pose.rot * Rot3::exp(&(self.gyro * tau));
        let trans = self.pose.pose.trans + self.vel * tau + 0.5 * self.acc * tau * tau;
        Pose3::new(rot, trans)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    /// piecewise propagation from the preceding knot
    Discrete,
    /// cumulative cubic B-spline
    Spline,
}

/// Uniformly spaced knots `t_j = origin + j·Δt`; old knots may be dropped from
/// the front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotBuffer {
    dt: f64,
    origin: f64,
    first: i64,
    knots: Vec<Knot>,
}

impl KnotBuffer {
    pub fn new(origin: f64, dt: f64) -> Self {
        KnotBuffer { dt, origin, first: 0, knots: Vec::new() }
    }

    pub fn spacing(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn time_of(&self, j: i64) -> f64 {
        self.origin + j as f64 * self.dt
    }

    pub fn first_index(&self) -> i64 {
        self.first
    }

    /// Index one past the last stored knot.
    pub fn end_index(&self) -> i64 {
        self.first + self.knots.len() as i64
    }

    /// Index of the knot opening the interval containing `t`.
    pub fn interval_of(&self, t: f64) -> i64 {
        let x = (t - self.origin) / self.dt;
        // tolerate round-off right at a knot
        let r = x.round();
        if (x - r).abs() < 1e-9 {
            r as i64
        } else {
            x.floor() as i64
        }
    }

    pub fn get(&self, j: i64) -> Option<&Knot> {
        if j < self.first {
            return None;
        }
        self.knots.get((j - self.first) as usize)
    }

    pub fn get_mut(&mut self, j: i64) -> Option<&mut Knot> {
        if j < self.first {
            return None;
        }
        self.knots.get_mut((j - self.first) as usize)
    }

    pub fn last(&self) -> Option<&Knot> {
        self.knots.last()
    }

    pub fn push(&mut self, knot: Knot) {
        if self.knots.is_empty() {
            self.first = self.interval_of(knot.t);
        }
        self.knots.push(knot);
    }

    /// Removes every knot with index greater than `j`.
    pub fn truncate_after(&mut self, j: i64) {
        let keep = (j - self.first + 1).clamp(0, self.knots.len() as i64) as usize;
        self.knots.truncate(keep);
    }

    /// Drops knots with index below `j`.
    pub fn drop_before(&mut self, j: i64) {
        let n = (j - self.first).clamp(0, self.knots.len() as i64) as usize;
        self.knots.drain(..n);
        self.first += n as i64;
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, &Knot)> {
        self.knots.iter().enumerate().map(move |(i, k)| (self.first + i as i64, k))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (i64, &mut Knot)> {
        let first = self.first;
        self.knots.iter_mut().enumerate().map(move |(i, k)| (first + i as i64, k))
    }

    fn out_of_window(&self, t: f64) -> SplineError {
        SplineError::OutOfWindow { t, start: self.time_of(self.first), end: self.time_of(self.end_index()) }
    }

    /// The control window whose interval contains `t`.
    pub fn window(&self, t: f64) -> Result<ControlWindow, SplineError> {
        let k = self.interval_of(t);
        let pick = |j: i64| self.get(j).ok_or_else(|| self.out_of_window(t));
        let poses = [pick(k - 1)?.pose, pick(k)?.pose, pick(k + 1)?.pose, pick(k + 2)?.pose];
        let times = [self.time_of(k - 1), self.time_of(k), self.time_of(k + 1), self.time_of(k + 2)];
        ControlWindow::new(poses, times, k)
    }

    /// Knot whose covariance is assigned to the interval containing `t`.
    pub fn assigned_knot(&self, t: f64) -> Result<&Knot, SplineError> {
        self.get(self.interval_of(t) + 1).ok_or_else(|| self.out_of_window(t))
    }

    pub fn pose_with_cov(&self, t: f64, mode: Interpolation) -> Result<PoseWithCov, SplineError> {
        match mode {
            Interpolation::Spline => interpolate(&self.window(t)?, t),
            Interpolation::Discrete => {
                let k = self.interval_of(t);
                let knot = self.get(k).ok_or_else(|| self.out_of_window(t))?;
                let cov = self.get(k + 1).ok_or_else(|| self.out_of_window(t))?.pose.cov;
                Ok(PoseWithCov::new(knot.advance(t - self.time_of(k)), cov))
            }
        }
    }

    pub fn view(&self, mode: Interpolation) -> BufferView<'_> {
        BufferView { buffer: self, mode }
    }
}

/// A [`KnotBuffer`] paired with an interpolation mode.
#[derive(Debug, Clone, Copy)]
pub struct BufferView<'a> {
    pub buffer: &'a KnotBuffer,
    pub mode: Interpolation,
}

impl PoseSource for BufferView<'_> {
    fn pose_at(&self, t: f64) -> Result<Pose3, SplineError> {
        Ok(self.buffer.pose_with_cov(t, self.mode)?.pose)
    }
}

/// Pose source with windows computed once per interval; queries are
/// read-only afterwards.
pub struct CachedSpline {
    origin: f64,
    dt: f64,
    first: i64,
    segments: Vec<(Pose3, [Twist6; 3])>,
}

impl CachedSpline {
    /// Precomputes every interval touched by `[t0, t1]`.
    pub fn new(buffer: &KnotBuffer, t0: f64, t1: f64) -> Result<Self, SplineError> {
        let (k0, k1) = (buffer.interval_of(t0), buffer.interval_of(t1));
        let mut segments = Vec::with_capacity((k1 - k0 + 1).max(0) as usize);
        for k in k0..=k1 {
            let w = buffer.window(buffer.time_of(k))?;
            segments.push((w.poses[0].pose, w.increments()?));
        }
        Ok(CachedSpline { origin: buffer.origin, dt: buffer.dt, first: k0, segments })
    }
}

impl PoseSource for CachedSpline {
    fn pose_at(&self, t: f64) -> Result<Pose3, SplineError> {
        let x = (t - self.origin) / self.dt;
        let r = x.round();
        let k = if (x - r).abs() < 1e-9 { r as i64 } else { x.floor() as i64 };
        let idx = k - self.first;
        if idx < 0 || idx >= self.segments.len() as i64 {
            return Err(SplineError::OutOfWindow {
                t,
                start: self.origin + self.first as f64 * self.dt,
                end: self.origin + (self.first + self.segments.len() as i64) as f64 * self.dt,
            });
        }
        let (base, omegas) = &self.segments[idx as usize];
        let s = ((t - (self.origin + k as f64 * self.dt)) / self.dt).clamp(0.0, 1.0);
        Ok(evaluate(base, omegas, s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant_velocity(t: f64) -> Pose3 {
        let w = Vector3::new(0.1, -0.2, 0.3);
        let v = Vector3::new(1.0, 0.5, -0.2);
        // screw motion: constant body twist
        Pose3::exp(&(Twist6::new(w.x, w.y, w.z, v.x, v.y, v.z) * t))
    }

    fn window_from(f: impl Fn(f64) -> Pose3, t_k: f64, dt: f64) -> ControlWindow {
        let times = [t_k - dt, t_k, t_k + dt, t_k + 2.0 * dt];
        let poses = times.map(|t| PoseWithCov::certain(f(t)));
        ControlWindow::new(poses, times, 0).unwrap()
    }

    #[test]
    fn basis_partitions() {
        assert_eq!(cumulative_basis(0.0), [5.0 / 6.0, 1.0 / 6.0, 0.0]);
        let b = cumulative_basis(1.0);
        assert!((b[0] - 1.0).abs() < 1e-15 && (b[1] - 5.0 / 6.0).abs() < 1e-15 && (b[2] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn incremental_pose_cases() {
        let a = constant_velocity(0.3);
        assert_eq!(incremental_pose(&a, &a).unwrap(), Twist6::zeros());
        let b = a * Pose3::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let xi = incremental_pose(&a, &b).unwrap();
        assert!((xi - Twist6::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0)).norm() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..100 {
            let a = Pose3::exp(&Twist6::from_fn(|_, _| rng.gen_range(-1.0..1.0)));
            let b = Pose3::exp(&Twist6::from_fn(|_, _| rng.gen_range(-1.0..1.0)));
            let xi = incremental_pose(&a, &b).unwrap();
            assert!(((a * Pose3::exp(&xi)).matrix() - b.matrix()).amax() < 1e-10);
        }
        let flip = Pose3::new(Rot3::exp(&Vector3::new(std::f64::consts::PI, 0.0, 0.0)), Vector3::zeros());
        assert!(incremental_pose(&Pose3::identity(), &flip).is_err());
    }

    #[test]
    fn identical_control_points() {
        let p = constant_velocity(0.7);
        let w = ControlWindow::new([PoseWithCov::certain(p); 4], [0.0, 0.1, 0.2, 0.3], 0).unwrap();
        for s in [0.0, 0.25, 0.5, 0.99] {
            let out = interpolate(&w, 0.1 + 0.1 * s).unwrap();
            assert!((out.pose.matrix() - p.matrix()).amax() < 1e-14);
        }
    }

    #[test]
    fn reproduces_constant_velocity() {
        let dt = 0.005;
        let w = window_from(constant_velocity, 1.0, dt);
        for i in 0..20 {
            let t = 1.0 + dt * i as f64 / 20.0;
            let out = interpolate(&w, t).unwrap();
            assert!((out.pose.trans - constant_velocity(t).trans).norm() < 1e-9);
            assert!(out.pose.rot.minus(&constant_velocity(t).rot).norm() < 1e-9);
        }
    }

    #[test]
    fn out_of_window_and_non_uniform() {
        let w = window_from(constant_velocity, 1.0, 0.1);
        assert!(matches!(interpolate(&w, 1.1), Err(SplineError::OutOfWindow { .. })));
        assert!(interpolate(&w, 0.95).is_err());
        let poses = [PoseWithCov::identity(); 4];
        assert_eq!(ControlWindow::new(poses, [0.0, 0.1, 0.25, 0.3], 0), Err(SplineError::NonUniformKnots));
    }

    #[test]
    fn assigned_covariance_is_right_knot() {
        let mut w = window_from(constant_velocity, 0.0, 0.1);
        for (i, p) in w.poses.iter_mut().enumerate() {
            p.cov = Matrix6::identity() * (i as f64 + 1.0);
        }
        for s in [0.0, 0.5, 0.9] {
            assert_eq!(interpolate(&w, 0.1 * s).unwrap().cov, Matrix6::identity() * 3.0);
        }
    }

    fn buffer_from(f: impl Fn(f64) -> Pose3, dt: f64, n: i64) -> KnotBuffer {
        let mut b = KnotBuffer::new(0.0, dt);
        for j in 0..n {
            let t = j as f64 * dt;
            b.push(Knot::at_rest(t, f(t)));
        }
        b
    }

    #[test]
    fn continuity_across_windows() {
        let wavy = |t: f64| {
            Pose3::new(
                Rot3::exp(&Vector3::new(0.3 * t.sin(), 0.2 * (2.0 * t).cos(), t)),
                Vector3::new(t.sin(), (0.5 * t).cos(), 0.1 * t * t),
            )
        };
        let b = buffer_from(wavy, 0.01, 100);
        for k in 2..90 {
            let tk = b.time_of(k);
            let left = interpolate(&b.window(tk - 1e-6 * 0.01).unwrap(), tk - 1e-6 * 0.01).unwrap();
            let w = b.window(b.time_of(k - 1)).unwrap();
            let at_end = evaluate(&w.poses[0].pose, &w.increments().unwrap(), 1.0);
            let right = interpolate(&b.window(tk).unwrap(), tk).unwrap();
            assert!((at_end.matrix() - right.pose.matrix()).amax() < 1e-9);
            assert!((left.pose.matrix() - right.pose.matrix()).amax() < 1e-6);
        }
    }

    #[test]
    fn relative_pose_properties() {
        let b = buffer_from(constant_velocity, 0.005, 200);
        let v = b.view(Interpolation::Spline);
        let r = v.relative_pose(0.3, 0.3).unwrap();
        assert!((r.matrix() - Pose3::identity().matrix()).amax() < 1e-14);
        let ab = v.relative_pose(0.2, 0.35).unwrap();
        let bc = v.relative_pose(0.35, 0.61).unwrap();
        let ac = v.relative_pose(0.2, 0.61).unwrap();
        assert!(((ab * bc).matrix() - ac.matrix()).amax() < 1e-10);
        assert!(v.relative_pose(0.2, 5.0).is_err());
    }

    #[test]
    fn straight_line_relative_translation() {
        let line = |t: f64| Pose3::from_translation(Vector3::new(t, 0.0, 0.0));
        let b = buffer_from(line, 0.005, 200);
        let r = b.view(Interpolation::Spline).relative_pose(0.4, 0.5).unwrap();
        assert!((r.trans.norm() - 0.1).abs() < 1e-9);
    }

    #[test]
    fn cached_spline_matches_buffer() {
        let b = buffer_from(constant_velocity, 0.005, 200);
        let c = CachedSpline::new(&b, 0.1, 0.6).unwrap();
        let v = b.view(Interpolation::Spline);
        for i in 0..100 {
            let t = 0.1 + 0.5 * i as f64 / 100.0;
            assert!((c.pose_at(t).unwrap().matrix() - v.pose_at(t).unwrap().matrix()).amax() < 1e-12);
        }
        assert!(c.pose_at(0.7).is_err());
    }

    #[test]
    fn buffer_bookkeeping() {
        let mut b = buffer_from(constant_velocity, 0.01, 50);
        assert_eq!(b.interval_of(0.1), 10);
        assert_eq!(b.interval_of(0.1 - 1e-13), 10);
        assert_eq!(b.interval_of(0.105), 10);
        b.drop_before(10);
        assert_eq!(b.first_index(), 10);
        assert!(b.get(9).is_none());
        assert!((b.get(10).unwrap().t - 0.1).abs() < 1e-12);
        b.truncate_after(20);
        assert_eq!(b.end_index(), 21);
        assert!(b.window(0.105).is_err());
        assert!(b.window(0.115).is_ok());
    }

    #[test]
    fn discrete_interpolation_follows_knot_motion() {
        let mut b = KnotBuffer::new(0.0, 0.01);
        let mut k0 = Knot::at_rest(0.0, Pose3::identity());
        k0.vel = Vector3::new(1.0, 0.0, 0.0);
        k0.acc = Vector3::new(0.0, 2.0, 0.0);
        k0.gyro = Vector3::new(0.0, 0.0, 1.0);
        b.push(k0);
        b.push(Knot::at_rest(0.01, k0.advance(0.01)));
        let p = b.pose_with_cov(0.004, Interpolation::Discrete).unwrap().pose;
        assert!((p.trans - Vector3::new(0.004, 0.5 * 2.0 * 0.004 * 0.004, 0.0)).norm() < 1e-15);
        assert!((p.rot.angle() - 0.004).abs() < 1e-12);
    }
}
