//! IMU and LiDAR synthesis from a scenario, and dataset export.

use std::path::Path;

use ctlio_core::imu::ImuSample;
use ctlio_core::io::{self, ImuEntry, IoError, LidarEntry, Manifest, PoseEntry, ScanFormat, ScanRecord};
use ctlio_core::lie::{Pose3, Rot3};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scenario::{LidarRig, Pattern, Scenario};
use crate::world::cast;

pub const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

const IMU_STREAM: u64 = 1;
const GUESS_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gauss3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.sample(StandardNormal))
}

/// Sample times `k / rate` through the duration plus padding.
pub fn imu_times(s: &Scenario) -> Vec<f64> {
    let n = ((s.duration + s.imu_padding) * s.imu.rate_hz + 1e-9).floor() as usize;
    (0..=n).map(|k| k as f64 / s.imu.rate_hz).collect()
}

/// Rates and specific force with constant biases and white noise of the
/// configured densities (per-sample deviation `n/√Δt`).
pub fn synth_imu(s: &Scenario) -> Vec<ImuSample> {
    let mut rng = stream(s.seed, IMU_STREAM);
    let scale = s.imu.rate_hz.sqrt();
    let (bg, ba) = (Vector3::from(s.imu.gyro_bias), Vector3::from(s.imu.acc_bias));
    imu_times(s)
        .into_iter()
        .map(|t| {
            let k = s.trajectory.at(t);
            let rt = k.pose.rot.inverse();
            let gyro = k.omega + bg + gauss3(&mut rng) * (s.imu.noise.gyro * scale);
            let acc = rt.act(&(k.acc - GRAVITY)) + ba + gauss3(&mut rng) * (s.imu.noise.acc * scale);
            ImuSample::new(t, gyro, acc)
        })
        .collect()
}

/// True IMU poses at the IMU sample times up to the duration.
pub fn truth(s: &Scenario) -> Vec<(f64, Pose3)> {
    imu_times(s).into_iter().filter(|t| *t <= s.duration + 1e-9).map(|t| (t, s.trajectory.at(t).pose)).collect()
}

/// Unit beam directions in the sensor frame and their firing fractions in
/// `(0, 1]` of the sweep.
pub fn beams(pattern: &Pattern, sweep: usize) -> Vec<(f64, Vector3<f64>)> {
    let deg = std::f64::consts::PI / 180.0;
    match *pattern {
        Pattern::Spinning { channels, vertical_deg, columns } => {
            let mut out = Vec::with_capacity(channels * columns);
            for c in 0..columns {
                let frac = (c + 1) as f64 / columns as f64;
                let az = -std::f64::consts::PI + 2.0 * std::f64::consts::PI * (c as f64 + 0.5) / columns as f64;
                for e in 0..channels {
                    let el = if channels == 1 {
                        0.0
                    } else {
                        (-0.5 + e as f64 / (channels - 1) as f64) * vertical_deg * deg
                    };
                    out.push((frac, Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())));
                }
            }
            out
        }
        Pattern::Raster { points, fov_deg, petals } => {
            // rose curve r = R·|sin(kθ)|, rotated by a golden-angle step per sweep
            let half = 0.5 * fov_deg * deg;
            let spin = 2.399_963_229_728_653 * sweep as f64;
            (0..points)
                .map(|n| {
                    let frac = (n + 1) as f64 / points as f64;
                    let theta = 2.0 * std::f64::consts::PI * 7.0 * n as f64 / points as f64 + spin;
                    let r = half * (petals * theta).sin().abs().max(0.02);
                    let (az, el) = (r * theta.cos(), r * theta.sin());
                    (frac, Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()))
                })
                .collect()
        }
    }
}

/// Number of complete sweeps of a rig inside the scenario.
pub fn sweep_count(s: &Scenario, rig: &LidarRig) -> usize {
    ((s.duration - rig.phase_offset) / rig.period() + 1e-9).floor().max(0.0) as usize
}

/// One sweep of a rig: beams fired along the sweep from the true pose at each
/// firing time, with additive range noise; misses are dropped.
pub fn synth_sweep(s: &Scenario, rig: &LidarRig, rig_index: usize, sweep: usize) -> Vec<ScanRecord> {
    let mut rng = stream(s.seed, 1000 + (rig_index as u64) * 1_000_000 + sweep as u64);
    let ext = rig.extrinsic.to_pose();
    let start = rig.phase_offset + sweep as f64 * rig.period();
    let mut out = Vec::new();
    let mut last_frac = f64::NAN;
    let mut sensor = Pose3::identity();
    for (frac, dir) in beams(&rig.pattern, sweep) {
        let t = if frac == 1.0 { rig.phase_offset + (sweep + 1) as f64 * rig.period() } else { start + frac * rig.period() };
        if frac != last_frac {
            sensor = s.trajectory.at(t).pose * ext;
            last_frac = frac;
        }
        let dir_w = sensor.rot.act(&dir);
        let Some((range, _)) = cast(&s.world, &sensor.trans, &dir_w, rig.max_range) else {
            continue;
        };
        let noisy = range + s.range_noise * rng.sample::<f64, _>(StandardNormal);
        if noisy < rig.min_range || noisy > rig.max_range {
            continue;
        }
        out.push((t, dir * noisy));
    }
    out
}

/// Every sweep of one rig, time ordered.
pub fn synth_stream(s: &Scenario, rig_index: usize) -> Vec<ScanRecord> {
    let rig = &s.lidars[rig_index];
    (0..sweep_count(s, rig))
        .into_par_iter()
        .map(|k| synth_sweep(s, rig, rig_index, k))
        .collect::<Vec<_>>()
        .concat()
}

/// True extrinsics perturbed by a fixed-size random rotation and offset.
pub fn extrinsic_guesses(s: &Scenario) -> Vec<Pose3> {
    let mut rng = stream(s.seed, GUESS_STREAM);
    s.lidars
        .iter()
        .map(|l| {
            let truth = l.extrinsic.to_pose();
            let axis = gauss3(&mut rng).normalize();
            let offset = gauss3(&mut rng).normalize();
            let rot = truth.rot * Rot3::exp(&(axis * s.guess_error.rot_deg.to_radians()));
            Pose3::new(rot, truth.trans + offset * s.guess_error.trans_m)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub imu_samples: usize,
    /// points written per lidar id
    pub points: Vec<(usize, usize)>,
    pub sweeps: Vec<(usize, usize)>,
    pub truth_poses: usize,
}

pub const MANIFEST: &str = "manifest.json";
pub const TRUTH: &str = "truth.tum";
pub const IMU: &str = "imu.csv";

/// Writes `imu.csv`, one scan file per LiDAR, `truth.tum`, the scenario and
/// the manifest into `dir`.
pub fn write_dataset(s: &Scenario, dir: &Path) -> Result<DatasetSummary, IoError> {
    let imu = synth_imu(s);
    io::write_imu_csv(&dir.join(IMU), &imu)?;
    let truth = truth(s);
    io::write_tum(&dir.join(TRUTH), &truth)?;
    let guesses = extrinsic_guesses(s);
    let mut lidars = Vec::new();
    let mut points = Vec::new();
    let mut sweeps = Vec::new();
    for (i, rig) in s.lidars.iter().enumerate() {
        let recs = synth_stream(s, i);
        let file = match s.scan_format {
            ScanFormat::Csv => format!("lidar_{}.csv", rig.id),
            ScanFormat::Bin => format!("lidar_{}.bin", rig.id),
        };
        match s.scan_format {
            ScanFormat::Csv => io::write_scan_csv(&dir.join(&file), &recs)?,
            ScanFormat::Bin => io::write_scan_bin(&dir.join(&file), &recs)?,
        }
        points.push((rig.id, recs.len()));
        sweeps.push((rig.id, sweep_count(s, rig)));
        lidars.push(LidarEntry {
            id: rig.id,
            file,
            format: s.scan_format,
            scan_period: rig.period(),
            phase_offset: rig.phase_offset,
            extrinsic_guess: PoseEntry::from_pose(&guesses[i]),
            fov: rig.fov(),
        });
    }
    io::write_json(&dir.join("scenario.json"), s)?;
    let manifest = Manifest {
        imu: ImuEntry { file: IMU.into(), rate_hz: s.imu.rate_hz },
        lidars,
        truth: Some(TRUTH.into()),
    };
    manifest.write(&dir.join(MANIFEST))?;
    Ok(DatasetSummary { imu_samples: imu.len(), points, sweeps, truth_poses: truth.len() })
}
