//! Analytic ground-truth motion with exact first and second derivatives.

use ctlio_core::lie::{Pose3, Rot3};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Value with its first and second time derivatives; enough forward-mode
/// arithmetic to differentiate the trajectories below.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Jet {
    v: f64,
    d: f64,
    dd: f64,
}

impl Jet {
    fn constant(v: f64) -> Self {
        Jet { v, d: 0.0, dd: 0.0 }
    }

    fn add(self, o: Jet) -> Jet {
        Jet { v: self.v + o.v, d: self.d + o.d, dd: self.dd + o.dd }
    }

    fn offset(self, c: f64) -> Jet {
        Jet { v: self.v + c, ..self }
    }

    fn scale(self, c: f64) -> Jet {
        Jet { v: self.v * c, d: self.d * c, dd: self.dd * c }
    }

    fn mul(self, o: Jet) -> Jet {
        Jet { v: self.v * o.v, d: self.d * o.v + self.v * o.d, dd: self.dd * o.v + 2.0 * self.d * o.d + self.v * o.dd }
    }

    /// `f(self)` given `f`, `f'` and `f''` at `self.v`.
    fn chain(self, f: f64, f1: f64, f2: f64) -> Jet {
        Jet { v: f, d: f1 * self.d, dd: f2 * self.d * self.d + f1 * self.dd }
    }

    fn sin(self) -> Jet {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }

    fn tanh(self) -> Jet {
        let th = self.v.tanh();
        let sech2 = 1.0 - th * th;
        self.chain(th, sech2, -2.0 * th * sech2)
    }

    fn atan(self) -> Jet {
        let q = 1.0 + self.v * self.v;
        self.chain(self.v.atan(), 1.0 / q, -2.0 * self.v / (q * q))
    }
}

/// Lateral shift of the path centred at `center` along the travel axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bend {
    pub center: f64,
    pub shift: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectorySpec {
    Stationary {
        position: [f64; 3],
        /// roll, pitch, yaw (rad)
        rpy: [f64; 3],
    },
    /// Travel along +x after a rest period, with smooth sideways bends; the
    /// heading follows the path tangent.
    Corridor {
        start: [f64; 3],
        speed: f64,
        /// rest until this time (s)
        depart: f64,
        /// duration of the speed ramp (s)
        ramp: f64,
        bends: Vec<Bend>,
        /// roll/pitch amplitude (rad)
        sway: f64,
        /// vertical oscillation amplitude (m)
        heave: f64,
    },
    /// Constant-rate horizontal circle, heading tangent to the path.
    Circle { center: [f64; 3], radius: f64, rate: f64 },
}

/// True motion at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub pose: Pose3,
    /// world frame
    pub vel: Vector3<f64>,
    /// world frame
    pub acc: Vector3<f64>,
    /// body frame
    pub omega: Vector3<f64>,
}

/// Body rate of `R = Rz(ψ)·Ry(θ)·Rx(φ)`.
fn euler_body_rate(roll: Jet, pitch: Jet, yaw: Jet) -> Vector3<f64> {
    let (sr, cr) = roll.v.sin_cos();
    let (sp, cp) = pitch.v.sin_cos();
    Vector3::new(
        roll.d - sp * yaw.d,
        cr * pitch.d + sr * cp * yaw.d,
        -sr * pitch.d + cr * cp * yaw.d,
    )
}

impl TrajectorySpec {
    pub fn at(&self, t: f64) -> Kinematics {
        match self {
            TrajectorySpec::Stationary { position, rpy } => Kinematics {
                pose: Pose3::new(Rot3::from_rpy(rpy[0], rpy[1], rpy[2]), Vector3::from(*position)),
                vel: Vector3::zeros(),
                acc: Vector3::zeros(),
                omega: Vector3::zeros(),
            },
            TrajectorySpec::Circle { center, radius, rate } => {
                let a = rate * t;
                let (s, c) = a.sin_cos();
                Kinematics {
                    pose: Pose3::new(
                        Rot3::from_rpy(0.0, 0.0, a + std::f64::consts::FRAC_PI_2),
                        Vector3::from(*center) + Vector3::new(radius * c, radius * s, 0.0),
                    ),
                    vel: Vector3::new(-radius * rate * s, radius * rate * c, 0.0),
                    acc: Vector3::new(-radius * rate * rate * c, -radius * rate * rate * s, 0.0),
                    omega: Vector3::new(0.0, 0.0, *rate),
                }
            }
            TrajectorySpec::Corridor { start, speed, depart, ramp, bends, sway, heave } => {
                let u = travel(t, *depart, *ramp).scale(*speed);
                let mut y = Jet::constant(0.0);
                let mut slope = Jet::constant(0.0);
                for b in bends {
                    let th = u.offset(-b.center).scale(1.0 / b.width).tanh();
                    y = y.add(th.offset(1.0).scale(0.5 * b.shift));
                    let sech2 = th.mul(th).scale(-1.0).offset(1.0);
                    slope = slope.add(sech2.scale(0.5 * b.shift / b.width));
                }
                let z = u.scale(0.8).sin().scale(*heave);
                let yaw = slope.atan();
                let roll = u.scale(1.7).offset(0.3).sin().scale(*sway);
                let pitch = u.scale(1.1).offset(0.5).sin().scale(*sway);
                Kinematics {
                    pose: Pose3::new(
                        Rot3::from_rpy(roll.v, pitch.v, yaw.v),
                        Vector3::new(start[0] + u.v, start[1] + y.v, start[2] + z.v),
                    ),
                    vel: Vector3::new(u.d, y.d, z.d),
                    acc: Vector3::new(u.dd, y.dd, z.dd),
                    omega: euler_body_rate(roll, pitch, yaw),
                }
            }
        }
    }
}

/// Distance profile for unit cruise speed: rest, a quintic-smoothstep speed
/// ramp, then cruise.
fn travel(t: f64, depart: f64, ramp: f64) -> Jet {
    let x = (t - depart) / ramp;
    if x <= 0.0 {
        Jet::constant(0.0)
    } else if x < 1.0 {
        let (x2, x3) = (x * x, x * x * x);
        Jet {
            v: ramp * (x3 * x3 - 3.0 * x3 * x2 + 2.5 * x2 * x2),
            d: 6.0 * x3 * x2 - 15.0 * x2 * x2 + 10.0 * x3,
            dd: 30.0 * x2 * (1.0 - x) * (1.0 - x) / ramp,
        }
    } else {
        Jet { v: 0.5 * ramp + (t - depart - ramp), d: 1.0, dd: 0.0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ctlio_core::lie::vee;

    fn corridor() -> TrajectorySpec {
        TrajectorySpec::Corridor {
            start: [0.0, 0.0, 1.5],
            speed: 1.5,
            depart: 0.6,
            ramp: 1.5,
            bends: vec![Bend { center: 4.0, shift: 3.0, width: 1.5 }, Bend { center: 10.0, shift: -3.0, width: 1.5 }],
            sway: 0.03,
            heave: 0.05,
        }
    }

    /// Central differences of position, velocity and orientation.
    fn check_derivatives(spec: &TrajectorySpec, times: &[f64]) {
        let h = 1e-5;
        for &t in times {
            let k = spec.at(t);
            let (a, b) = (spec.at(t - h), spec.at(t + h));
            let vel = (b.pose.trans - a.pose.trans) / (2.0 * h);
            let acc = (b.vel - a.vel) / (2.0 * h);
            let dr = (b.pose.rot.matrix() - a.pose.rot.matrix()) / (2.0 * h);
            let omega = vee(&(k.pose.rot.matrix().transpose() * dr));
            assert!((vel - k.vel).norm() < 1e-6, "vel at {t}: {vel} vs {}", k.vel);
            assert!((acc - k.acc).norm() < 1e-5, "acc at {t}: {acc} vs {}", k.acc);
            assert!((omega - k.omega).norm() < 1e-6, "omega at {t}: {omega} vs {}", k.omega);
        }
    }

    #[test]
    fn corridor_derivatives_match_differences() {
        let times: Vec<f64> = (0..200).map(|i| 0.05 * i as f64 + 0.013).collect();
        check_derivatives(&corridor(), &times);
    }

    #[test]
    fn circle_derivatives_match_differences() {
        let c = TrajectorySpec::Circle { center: [1.0, 2.0, 1.0], radius: 3.0, rate: 0.7 };
        check_derivatives(&c, &[0.0, 0.3, 1.9, 7.2]);
        let k = c.at(1.0);
        assert!((k.acc.norm() - 3.0 * 0.49).abs() < 1e-12);
    }

    #[test]
    fn corridor_rests_then_moves_smoothly() {
        let c = corridor();
        let a = c.at(0.0);
        let b = c.at(0.59);
        assert_eq!(a.pose.trans, b.pose.trans);
        assert_eq!(b.vel.norm(), 0.0);
        assert_eq!(b.omega.norm(), 0.0);
        assert!(c.at(5.0).vel.norm() > 1.4);
        // acceleration is continuous across the ramp ends
        for t in [0.6, 2.1] {
            assert!((c.at(t - 1e-7).acc - c.at(t + 1e-7).acc).norm() < 1e-4);
        }
        let end = c.at(10.0).pose.trans;
        assert!(end.x > 12.0 && end.y.abs() < 0.1);
    }
}
