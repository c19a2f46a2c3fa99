//! Dataset files: IMU and scan CSVs, binary scans, the sensor manifest and
//! TUM trajectories.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imu::ImuSample;
use crate::lie::{Pose3, Rot3};
use crate::scan::{LidarScan, ScanError, TimedPoint};

pub const IMU_HEADER: &str = "t,wx,wy,wz,ax,ay,az";
pub const SCAN_HEADER: &str = "t,x,y,z";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Scan(#[from] ScanError),
    #[error("manifest: {0}")]
    Manifest(String),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File { path: path.to_path_buf(), source }
}

fn parse_rows(path: &Path, header: &str, width: usize, sep: fn(&str) -> Vec<&str>) -> Result<Vec<Vec<f64>>, IoError> {
    let file = fs::File::open(path).map_err(file_err(path))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(file_err(path))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (n == 0 && line.replace(' ', "") == header.replace(' ', "")) {
            continue;
        }
        let fields = sep(line);
        if fields.len() != width {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: format!("expected {width} fields, found {}", fields.len()),
            });
        }
        let row = fields
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| IoError::Parse { path: path.to_path_buf(), line: n + 1, msg: e.to_string() })?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(IoError::Parse { path: path.to_path_buf(), line: n + 1, msg: "non-finite value".into() });
        }
        rows.push(row);
    }
    Ok(rows)
}

fn commas(s: &str) -> Vec<&str> {
    s.split(',').collect()
}

fn spaces(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, IoError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(file_err(dir))?;
        }
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(file_err(path))?))
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>, IoError> {
    let mut out: Vec<ImuSample> = parse_rows(path, IMU_HEADER, 7, commas)?
        .into_iter()
        .map(|r| ImuSample::new(r[0], Vector3::new(r[1], r[2], r[3]), Vector3::new(r[4], r[5], r[6])))
        .collect();
    out.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(out)
}

pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<(), IoError> {
    let mut w = create(path)?;
    let res: std::io::Result<()> = (|| {
        writeln!(w, "{IMU_HEADER}")?;
        for s in samples {
            writeln!(w, "{},{},{},{},{},{},{}", s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.acc.x, s.acc.y, s.acc.z)?;
        }
        w.flush()
    })();
    res.map_err(file_err(path))
}

/// Raw `(t, xyz)` records of one LiDAR stream.
pub type ScanRecord = (f64, Vector3<f64>);

pub fn read_scan_csv(path: &Path) -> Result<Vec<ScanRecord>, IoError> {
    Ok(parse_rows(path, SCAN_HEADER, 4, commas)?
        .into_iter()
        .map(|r| (r[0], Vector3::new(r[1], r[2], r[3])))
        .collect())
}

pub fn write_scan_csv(path: &Path, records: &[ScanRecord]) -> Result<(), IoError> {
    let mut w = create(path)?;
    let res: std::io::Result<()> = (|| {
        writeln!(w, "{SCAN_HEADER}")?;
        for (t, p) in records {
            writeln!(w, "{},{},{},{}", t, p.x, p.y, p.z)?;
        }
        w.flush()
    })();
    res.map_err(file_err(path))
}

/// Little-endian f64 quadruples `t x y z`, no header.
pub fn read_scan_bin(path: &Path) -> Result<Vec<ScanRecord>, IoError> {
    let mut bytes = Vec::new();
    fs::File::open(path).map_err(file_err(path))?.read_to_end(&mut bytes).map_err(file_err(path))?;
    if bytes.len() % 32 != 0 {
        return Err(IoError::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("{} bytes is not a whole number of 32-byte records", bytes.len()),
        });
    }
    let f = |c: &[u8]| f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
    Ok(bytes
        .chunks_exact(32)
        .map(|r| (f(&r[0..8]), Vector3::new(f(&r[8..16]), f(&r[16..24]), f(&r[24..32]))))
        .collect())
}

pub fn write_scan_bin(path: &Path, records: &[ScanRecord]) -> Result<(), IoError> {
    let mut w = create(path)?;
    let res: std::io::Result<()> = (|| {
        for (t, p) in records {
            for v in [*t, p.x, p.y, p.z] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    })();
    res.map_err(file_err(path))
}

/// Splits a stream into scans covering `(phase + k·period, phase + (k+1)·period]`.
pub fn split_scans(records: &[ScanRecord], lidar_id: usize, period: f64, phase: f64) -> Result<Vec<LidarScan>, IoError> {
    if !(period > 0.0) {
        return Err(IoError::Manifest(format!("lidar {lidar_id}: scan period must be positive")));
    }
    let mut sorted: Vec<&ScanRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut scans = Vec::new();
    let mut current: Option<i64> = None;
    let mut pts = Vec::new();
    for (t, p) in sorted {
        let k = (((t - phase) / period) - 1e-6).ceil() as i64 - 1;
        if current.is_some_and(|c| c != k) && !pts.is_empty() {
            scans.push(LidarScan::new(lidar_id, std::mem::take(&mut pts))?);
        }
        current = Some(k);
        if p.norm() > 0.0 {
            pts.push(TimedPoint::new(*p, *t, lidar_id));
        }
    }
    if !pts.is_empty() {
        scans.push(LidarScan::new(lidar_id, pts)?);
    }
    Ok(scans)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanFormat {
    Csv,
    Bin,
}

/// Rigid transform stored as translation plus unit quaternion `[x, y, z, w]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    pub translation: [f64; 3],
    pub quaternion: [f64; 4],
}

impl PoseEntry {
    pub fn from_pose(p: &Pose3) -> Self {
        let q = p.rot.to_quaternion();
        PoseEntry { translation: [p.trans.x, p.trans.y, p.trans.z], quaternion: [q.i, q.j, q.k, q.w] }
    }

    pub fn to_pose(&self) -> Pose3 {
        let [x, y, z, w] = self.quaternion;
        let q = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
        Pose3::new(Rot3::from_quaternion(&q), Vector3::from(self.translation))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FovEntry {
    pub horizontal_deg: f64,
    pub vertical_deg: f64,
    /// scan pattern name, e.g. "spinning" or "rosette"
    pub pattern: String,
    /// boresight yaw in the sensor frame (deg)
    #[serde(default)]
    pub center_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarEntry {
    pub id: usize,
    pub file: String,
    pub format: ScanFormat,
    pub scan_period: f64,
    #[serde(default)]
    pub phase_offset: f64,
    pub extrinsic_guess: PoseEntry,
    pub fov: FovEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImuEntry {
    pub file: String,
    pub rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub imu: ImuEntry,
    pub lidars: Vec<LidarEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<String>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, IoError> {
        let text = fs::read_to_string(path).map_err(file_err(path))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|source| IoError::Json { path: path.to_path_buf(), source })?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        let mut w = create(path)?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(file_err(path))
    }

    pub fn validate(&self) -> Result<(), IoError> {
        if self.lidars.is_empty() {
            return Err(IoError::Manifest("no lidars listed".into()));
        }
        let mut ids: Vec<usize> = self.lidars.iter().map(|l| l.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.lidars.len() {
            return Err(IoError::Manifest("duplicate lidar id".into()));
        }
        if !(self.imu.rate_hz > 0.0) {
            return Err(IoError::Manifest("imu rate must be positive".into()));
        }
        Ok(())
    }

    pub fn lidar_ids(&self) -> Vec<usize> {
        self.lidars.iter().map(|l| l.id).collect()
    }

    /// Loads and splits every stream; files are resolved against `dir`.
    pub fn load_scans(&self, dir: &Path) -> Result<Vec<LidarScan>, IoError> {
        let mut out = Vec::new();
        for l in &self.lidars {
            let path = dir.join(&l.file);
            let recs = match l.format {
                ScanFormat::Csv => read_scan_csv(&path)?,
                ScanFormat::Bin => read_scan_bin(&path)?,
            };
            out.extend(split_scans(&recs, l.id, l.scan_period, l.phase_offset)?);
        }
        out.sort_by(|a, b| a.arrival().total_cmp(&b.arrival()).then(a.lidar_id.cmp(&b.lidar_id)));
        Ok(out)
    }
}

pub type StampedPose3 = (f64, Pose3);

/// `t x y z qx qy qz qw` per line; `#` lines are comments.
pub fn read_tum(path: &Path) -> Result<Vec<StampedPose3>, IoError> {
    let mut out: Vec<StampedPose3> = parse_rows(path, "", 8, spaces)?
        .into_iter()
        .map(|r| (r[0], PoseEntry { translation: [r[1], r[2], r[3]], quaternion: [r[4], r[5], r[6], r[7]] }.to_pose()))
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

pub fn write_tum(path: &Path, poses: &[StampedPose3]) -> Result<(), IoError> {
    let mut w = create(path)?;
    let res: std::io::Result<()> = (|| {
        writeln!(w, "# t x y z qx qy qz qw")?;
        for (t, p) in poses {
            let e = PoseEntry::from_pose(p);
            let [x, y, z] = e.translation;
            let [qx, qy, qz, qw] = e.quaternion;
            writeln!(w, "{t} {x} {y} {z} {qx} {qy} {qz} {qw}")?;
        }
        w.flush()
    })();
    res.map_err(file_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut w = create(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json { path: path.to_path_buf(), source })?;
    w.write_all(text.as_bytes()).and_then(|_| w.write_all(b"\n")).and_then(|_| w.flush()).map_err(file_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json { path: path.to_path_buf(), source })
}
