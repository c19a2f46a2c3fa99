//! Run configuration, ablation modes and environment overrides.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::imu::NoiseParams;
use crate::plane::FicParams;
use crate::spline::Interpolation;

/// Prefix of environment overrides; nested keys join with `__`, e.g.
/// `CTLIO_FIC__TAU=0.8` or `CTLIO_MODE=UNC`.
pub const ENV_PREFIX: &str = "CTLIO_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown mode {0:?}")]
    UnknownMode(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("bad override {key}: {reason}")]
    Override { key: String, reason: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "RAW")]
    Raw,
    #[serde(rename = "CNT")]
    Cnt,
    #[serde(rename = "F-UNC")]
    FUnc,
    #[serde(rename = "UNC")]
    Unc,
    #[serde(rename = "FULL")]
    Full,
}

/// How the pose uncertainty feeding each point is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointUncertainty {
    /// measurement noise only
    MeasurementOnly,
    /// the prior pose covariance of the frame for every point
    EndOfScan,
    /// acquisition-time chain per point
    PointWise,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Raw, Mode::Cnt, Mode::FUnc, Mode::Unc, Mode::Full];

    pub fn interpolation(self) -> Interpolation {
        match self {
            Mode::Cnt | Mode::Full => Interpolation::Spline,
            Mode::Raw | Mode::FUnc | Mode::Unc => Interpolation::Discrete,
        }
    }

    /// Residual scaling, noise and frame weight from uncertainty.
    pub fn weighted(self) -> bool {
        !matches!(self, Mode::Raw | Mode::Cnt)
    }

    pub fn point_uncertainty(self) -> PointUncertainty {
        match self {
            Mode::Raw | Mode::Cnt => PointUncertainty::MeasurementOnly,
            Mode::FUnc => PointUncertainty::EndOfScan,
            Mode::Unc | Mode::Full => PointUncertainty::PointWise,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Raw => "RAW",
            Mode::Cnt => "CNT",
            Mode::FUnc => "F-UNC",
            Mode::Unc => "UNC",
            Mode::Full => "FULL",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .iter()
            .copied()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| ConfigError::UnknownMode(s.to_string()))
    }
}

/// Standard deviations of the initial state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialStd {
    pub rot: f64,
    pub pos: f64,
    pub vel: f64,
    pub bias_gyro: f64,
    pub bias_acc: f64,
    pub gravity: f64,
    pub ext_rot: f64,
    pub ext_pos: f64,
}

impl Default for InitialStd {
    fn default() -> Self {
        InitialStd {
            rot: 1e-3,
            pos: 1e-3,
            vel: 1e-2,
            bias_gyro: 1e-3,
            bias_acc: 5e-2,
            gravity: 1e-2,
            ext_rot: 5e-3,
            ext_pos: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: Mode,
    pub fic: FicParams,
    pub noise: NoiseParams,
    /// diagonal of the point measurement covariance (m²)
    pub z_diag: [f64; 3],
    pub epsilon: f64,
    pub max_iter: usize,
    /// map voxel edge (m)
    pub map_resolution: f64,
    pub voxel_capacity: usize,
    /// merged-frame voxel edge before matching (m), 0 disables
    pub scan_voxel: f64,
    /// largest neighbour offset from a fitted plane (m)
    pub plane_threshold: f64,
    pub knn: usize,
    /// farthest neighbour accepted for a plane (m)
    pub max_neighbor_dist: f64,
    /// largest point-to-plane distance used as a residual (m)
    pub max_residual: f64,
    /// residual noise when weighting is off
    pub uniform_noise: f64,
    pub rebalance_alpha: f64,
    /// stationary span used to level the start (s)
    pub init_duration: f64,
    pub initial_std: InitialStd,
    pub queue_capacity: usize,
    /// knots kept behind the latest update (s)
    pub history: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Full,
            fic: FicParams::default(),
            noise: NoiseParams::default(),
            z_diag: [0.05; 3],
            epsilon: 1e-3,
            max_iter: 5,
            map_resolution: 0.4,
            voxel_capacity: 1,
            scan_voxel: 0.5,
            plane_threshold: 0.03,
            knn: 5,
            max_neighbor_dist: 2.0,
            max_residual: 0.1,
            uniform_noise: 0.01,
            rebalance_alpha: 0.7,
            init_duration: 0.5,
            initial_std: InitialStd::default(),
            queue_capacity: 8,
            history: 1.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !self.fic.is_valid() {
            return bad("each fic interval needs min < max and tau > 0");
        }
        if !self.noise.is_valid() {
            return bad("noise densities must be finite and non-negative");
        }
        if self.z_diag.iter().any(|z| !(*z >= 0.0)) {
            return bad("z_diag must be non-negative");
        }
        if !(self.epsilon > 0.0) || self.max_iter == 0 {
            return bad("epsilon must be positive and max_iter at least 1");
        }
        if !(self.map_resolution > 0.0) || self.voxel_capacity == 0 || self.knn < 3 {
            return bad("map_resolution > 0, voxel_capacity >= 1 and knn >= 3 required");
        }
        if !(self.uniform_noise > 0.0) || !(0.5..=1.0).contains(&self.rebalance_alpha) {
            return bad("uniform_noise > 0 and rebalance_alpha in [0.5, 1] required");
        }
        if self.init_duration < 0.0 || self.queue_capacity == 0 {
            return bad("init_duration >= 0 and queue_capacity >= 1 required");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every overridable key as its environment variable name.
    pub fn env_keys(&self) -> Vec<String> {
        let mut out = Vec::new();
        collect_keys(&serde_json::to_value(self).expect("config serializes"), ENV_PREFIX, &mut out);
        out
    }

    /// Applies `CTLIO_*` variables. Values are parsed as JSON first, then
    /// taken as plain strings.
    pub fn with_overrides<I, K, V>(&self, vars: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut tree = serde_json::to_value(self)?;
        for (k, v) in vars {
            let Some(rest) = k.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let path: Vec<String> = rest.split("__").map(str::to_ascii_lowercase).collect();
            let raw = v.as_ref();
            let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let slot = lookup(&mut tree, &path).ok_or_else(|| ConfigError::Override {
                key: k.as_ref().to_string(),
                reason: "no such config key".into(),
            })?;
            *slot = value;
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| ConfigError::Override {
            key: "environment".into(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_env(&self) -> Result<Self, ConfigError> {
        self.with_overrides(std::env::vars())
    }
}

fn collect_keys(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let sep = if prefix.ends_with('_') && prefix == ENV_PREFIX { "" } else { "__" };
                collect_keys(child, &format!("{prefix}{sep}{}", k.to_ascii_uppercase()), out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn lookup<'a>(tree: &'a mut Value, path: &[String]) -> Option<&'a mut Value> {
    let mut cur = tree;
    for key in path {
        cur = cur.as_object_mut()?.get_mut(key)?;
    }
    Some(cur)
}
