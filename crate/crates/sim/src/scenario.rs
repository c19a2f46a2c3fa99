//! Scenario description and the named presets.

use ctlio_core::imu::NoiseParams;
use ctlio_core::io::{FovEntry, PoseEntry, ScanFormat};
use ctlio_core::lie::{Pose3, Rot3};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{Bend, TrajectorySpec};
use crate::world::{corridor_world, tunnel_world, yard, Rect};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pattern {
    /// Azimuth sweep over a fixed set of elevations.
    Spinning { channels: usize, vertical_deg: f64, columns: usize },
    /// Rose-curve sweep inside a cone around +x, rotated a little every scan
    /// so coverage does not repeat.
    Raster { points: usize, fov_deg: f64, petals: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarRig {
    pub id: usize,
    /// true `T_IL`
    pub extrinsic: PoseEntry,
    pub pattern: Pattern,
    pub rate_hz: f64,
    /// start of the first sweep (s)
    pub phase_offset: f64,
    pub min_range: f64,
    pub max_range: f64,
}

impl LidarRig {
    pub fn period(&self) -> f64 {
        1.0 / self.rate_hz
    }

    pub fn fov(&self) -> FovEntry {
        match self.pattern {
            Pattern::Spinning { vertical_deg, .. } => FovEntry {
                horizontal_deg: 360.0,
                vertical_deg,
                pattern: "spinning".into(),
                center_deg: 0.0,
            },
            Pattern::Raster { fov_deg, .. } => FovEntry {
                horizontal_deg: fov_deg,
                vertical_deg: fov_deg,
                pattern: "raster".into(),
                center_deg: 0.0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSpec {
    pub rate_hz: f64,
    pub noise: NoiseParams,
    pub gyro_bias: [f64; 3],
    pub acc_bias: [f64; 3],
}

/// Size of the perturbation applied to the true extrinsics before they are
/// written to the manifest as initial guesses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuessError {
    pub rot_deg: f64,
    pub trans_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    /// last scan ends by this time (s)
    pub duration: f64,
    /// extra IMU data past the duration (s)
    pub imu_padding: f64,
    pub imu: ImuSpec,
    /// range noise standard deviation (m)
    pub range_noise: f64,
    pub lidars: Vec<LidarRig>,
    pub trajectory: TrajectorySpec,
    pub world: Vec<Rect>,
    pub guess_error: GuessError,
    pub scan_format: ScanFormat,
}

pub const PRESETS: [&str; 10] = [
    "minimal",
    "stationary",
    "corridor",
    "corridor-1",
    "corridor-2",
    "corridor-zero-noise",
    "tunnel",
    "open-world",
    "disjoint-fov",
    "circle",
];

fn rig(id: usize, extrinsic: Pose3, pattern: Pattern, phase: f64) -> LidarRig {
    LidarRig {
        id,
        extrinsic: PoseEntry::from_pose(&extrinsic),
        pattern,
        rate_hz: 10.0,
        phase_offset: phase,
        min_range: 0.3,
        max_range: 60.0,
    }
}

fn spinning() -> Pattern {
    Pattern::Spinning { channels: 16, vertical_deg: 30.0, columns: 360 }
}

fn raster() -> Pattern {
    Pattern::Raster { points: 4000, fov_deg: 70.0, petals: 3.5 }
}

/// Roof spinner plus two tilted solid-state units looking forward-left and
/// backward-right, staggered by 0, 30 and 50 ms.
fn three_rig() -> Vec<LidarRig> {
    let deg = std::f64::consts::PI / 180.0;
    vec![
        rig(0, Pose3::new(Rot3::from_rpy(0.0, 0.0, 0.0), Vector3::new(0.0, 0.0, 0.3)), spinning(), 0.0),
        rig(1, Pose3::new(Rot3::from_rpy(0.0, 10.0 * deg, 45.0 * deg), Vector3::new(0.4, 0.2, 0.1)), raster(), 0.03),
        rig(2, Pose3::new(Rot3::from_rpy(0.0, 10.0 * deg, -135.0 * deg), Vector3::new(-0.4, -0.2, 0.1)), raster(), 0.05),
    ]
}

fn realistic_imu() -> ImuSpec {
    ImuSpec {
        rate_hz: 200.0,
        noise: NoiseParams { gyro: 0.01, acc: 0.1, gyro_bias_walk: 0.0, acc_bias_walk: 0.0 },
        gyro_bias: [0.002, -0.001, 0.0015],
        acc_bias: [0.02, -0.01, 0.015],
    }
}

fn clean_imu() -> ImuSpec {
    ImuSpec { rate_hz: 200.0, noise: NoiseParams::zero(), gyro_bias: [0.0; 3], acc_bias: [0.0; 3] }
}

fn corridor_path() -> TrajectorySpec {
    TrajectorySpec::Corridor {
        start: [0.0, 0.0, 1.2],
        speed: 1.5,
        depart: 0.6,
        ramp: 1.5,
        bends: vec![Bend { center: 4.0, shift: 3.0, width: 1.5 }, Bend { center: 10.0, shift: -3.0, width: 1.5 }],
        sway: 0.03,
        heave: 0.05,
    }
}

fn corridor(name: &str, lidars: Vec<LidarRig>, imu: ImuSpec, range_noise: f64, guess: GuessError) -> Scenario {
    let trajectory = corridor_path();
    Scenario {
        name: name.into(),
        seed: 7,
        duration: 10.0,
        imu_padding: 0.1,
        imu,
        range_noise,
        lidars,
        world: corridor_world(&trajectory, 10.0, 2.5, 3.5),
        trajectory,
        guess_error: guess,
        scan_format: ScanFormat::Bin,
    }
}

fn straight(speed: f64, start_x: f64) -> TrajectorySpec {
    TrajectorySpec::Corridor {
        start: [start_x, 0.0, 1.2],
        speed,
        depart: 0.6,
        ramp: 1.5,
        bends: vec![],
        sway: 0.02,
        heave: 0.03,
    }
}

impl Scenario {
    pub fn preset(name: &str) -> Result<Scenario, ScenarioError> {
        let small_guess = GuessError { rot_deg: 0.3, trans_m: 0.01 };
        let exact = GuessError { rot_deg: 0.0, trans_m: 0.0 };
        let rigs = three_rig();
        let s = match name {
            "minimal" => {
                let mut s = corridor(name, rigs[..1].to_vec(), realistic_imu(), 0.02, small_guess);
                s.duration = 1.0;
                s.scan_format = ScanFormat::Csv;
                s
            }
            "stationary" => {
                let trajectory = TrajectorySpec::Stationary { position: [0.0, 0.0, 1.2], rpy: [0.0, 0.0, 0.0] };
                let mut s = corridor(name, rigs[..2].to_vec(), clean_imu(), 0.0, exact);
                s.duration = 2.0;
                s.world = corridor_world(&trajectory, 2.0, 2.5, 3.5);
                s.world.extend(crate::world::pillar(3.0, 0.0, 0.3, 0.0, 3.5));
                s.trajectory = trajectory;
                s
            }
            "corridor" => corridor(name, rigs, realistic_imu(), 0.02, small_guess),
            "corridor-1" => corridor(name, rigs[..1].to_vec(), realistic_imu(), 0.02, small_guess),
            "corridor-2" => corridor(name, rigs[..2].to_vec(), realistic_imu(), 0.02, small_guess),
            "corridor-zero-noise" => corridor(name, rigs, clean_imu(), 0.0, exact),
            "tunnel" | "open-world" => {
                let trajectory = straight(3.0, -8.0);
                let world = if name == "tunnel" { tunnel_world(0.0, 20.0, 2.0, 3.0) } else { yard(-8.0, 40.0) };
                let mut rigs = rigs;
                for r in &mut rigs {
                    r.max_range = 12.0;
                }
                Scenario {
                    name: name.into(),
                    seed: 11,
                    duration: 15.0,
                    imu_padding: 0.1,
                    imu: realistic_imu(),
                    range_noise: 0.02,
                    lidars: rigs,
                    trajectory,
                    world,
                    guess_error: small_guess,
                    scan_format: ScanFormat::Bin,
                }
            }
            "disjoint-fov" => {
                let deg = std::f64::consts::PI / 180.0;
                let lidars = vec![
                    rig(0, Pose3::new(Rot3::identity(), Vector3::new(0.3, 0.0, 0.2)), raster(), 0.0),
                    rig(1, Pose3::new(Rot3::from_rpy(0.0, 0.0, 180.0 * deg), Vector3::new(-0.3, 0.0, 0.2)), raster(), 0.05),
                ];
                let mut s = corridor(name, lidars, realistic_imu(), 0.02, small_guess);
                s.duration = 4.0;
                s
            }
            "circle" => {
                let trajectory = TrajectorySpec::Circle { center: [0.0, 0.0, 1.2], radius: 2.0, rate: 0.5 };
                let mut s = corridor(name, rigs[..1].to_vec(), clean_imu(), 0.0, exact);
                s.duration = 2.0;
                s.world = yard(-6.0, 6.0);
                s.trajectory = trajectory;
                s
            }
            other => return Err(ScenarioError::UnknownPreset(other.to_string())),
        };
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if !(self.duration > 0.0) || self.imu_padding < 0.0 {
            return bad("duration must be positive and padding non-negative".into());
        }
        if !(self.imu.rate_hz > 0.0) || !self.imu.noise.is_valid() || self.range_noise < 0.0 {
            return bad("imu rate, noise densities or range noise out of range".into());
        }
        if self.lidars.is_empty() || self.world.is_empty() {
            return bad("need at least one lidar and one world rectangle".into());
        }
        let mut ids: Vec<usize> = self.lidars.iter().map(|l| l.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.lidars.len() {
            return bad("duplicate lidar id".into());
        }
        for l in &self.lidars {
            if !(l.rate_hz > 0.0) || !(l.max_range > l.min_range) || l.phase_offset < 0.0 {
                return bad(format!("lidar {}: bad rate, range limits or phase", l.id));
            }
            let empty = match l.pattern {
                Pattern::Spinning { channels, columns, .. } => channels == 0 || columns == 0,
                Pattern::Raster { points, .. } => points == 0,
            };
            if empty {
                return bad(format!("lidar {}: pattern has no beams", l.id));
            }
        }
        Ok(())
    }
}
