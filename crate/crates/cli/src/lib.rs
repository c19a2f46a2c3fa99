//! Subcommand implementations: dataset generation, odometry runs and
//! trajectory evaluation.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ctlio_core::config::RunConfig;
use ctlio_core::io::{self, Manifest};
use ctlio_core::lie::Pose3;
use ctlio_core::odometry::{FrameReport, Odometry, StageTimes};
use ctlio_sim::synth::DatasetSummary;
use ctlio_sim::{evaluate, write_dataset, Metrics, Scenario};
use serde::{Deserialize, Serialize};

/// Default segment length for relative errors (m).
pub const DEFAULT_DELTA: f64 = 1.0;

pub const TRAJECTORY_FILE: &str = "trajectory.tum";
pub const MAP_FILE: &str = "map.ply";
pub const TIMING_FILE: &str = "timing.json";
pub const FRAMES_FILE: &str = "frames.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config.json";

/// A preset name or a path to a scenario JSON file.
pub fn load_scenario(spec: &str) -> Result<Scenario> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {spec}"))?;
        return Ok(Scenario::from_json(&text)?);
    }
    Scenario::preset(spec).with_context(|| format!("{spec:?} is neither a file nor a preset"))
}

pub fn cmd_simulate(scenario: &Scenario, out: &Path) -> Result<DatasetSummary> {
    scenario.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(write_dataset(scenario, out)?)
}

/// One line of the timing report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub frame: usize,
    pub t: f64,
    pub lidars: usize,
    pub points: usize,
    pub stages: StageTimes,
    pub total_ms: f64,
}

impl From<&FrameReport> for FrameTiming {
    fn from(r: &FrameReport) -> Self {
        FrameTiming { frame: r.frame, t: r.t, lidars: r.lidars.len(), points: r.raw_points, stages: r.stages, total_ms: r.total_ms }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trajectory: Vec<(f64, Pose3)>,
    pub reports: Vec<FrameReport>,
    pub metrics: Option<Metrics>,
    pub map_size: usize,
    pub dropped_scans: usize,
}

/// Runs the odometry over a dataset directory. With `out` set, writes the
/// trajectory, map, timing, per-frame log, effective config and, when the
/// dataset has a truth file, the metrics.
pub fn cmd_run(dataset: &Path, cfg: &RunConfig, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let manifest = Manifest::read(&dataset.join(ctlio_sim::synth::MANIFEST))?;
    let imu = io::read_imu_csv(&dataset.join(&manifest.imu.file))?;
    let scans = manifest.load_scans(dataset)?;
    let extrinsics: Vec<(usize, Pose3)> = manifest.lidars.iter().map(|l| (l.id, l.extrinsic_guess.to_pose())).collect();

    let mut odo = Odometry::new(cfg.clone(), &extrinsics, imu)?;
    odo.run(scans)?;
    if odo.trajectory().is_empty() {
        bail!("no frame was processed");
    }
    let trajectory = odo.trajectory().to_vec();
    let metrics = match &manifest.truth {
        Some(file) => {
            let truth = io::read_tum(&dataset.join(file))?;
            Some(evaluate(&trajectory, &truth, DEFAULT_DELTA)?)
        }
        None => None,
    };
    let outcome = RunOutcome {
        trajectory,
        reports: odo.reports().to_vec(),
        metrics,
        map_size: odo.map().len(),
        dropped_scans: odo.dropped_scans(),
    };
    if let Some(out) = out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        io::write_tum(&out.join(TRAJECTORY_FILE), &outcome.trajectory)?;
        let ply = out.join(MAP_FILE);
        let file = File::create(&ply).with_context(|| format!("creating {}", ply.display()))?;
        odo.map().write_ply(BufWriter::new(file)).with_context(|| format!("writing {}", ply.display()))?;
        let timing: Vec<FrameTiming> = outcome.reports.iter().map(FrameTiming::from).collect();
        io::write_json(&out.join(TIMING_FILE), &timing)?;
        io::write_json(&out.join(FRAMES_FILE), &outcome.reports)?;
        fs::write(out.join(CONFIG_FILE), cfg.to_json()).context("writing effective config")?;
        if let Some(m) = &outcome.metrics {
            io::write_json(&out.join(METRICS_FILE), m)?;
        }
    }
    Ok(outcome)
}

pub fn cmd_eval(est: &Path, truth: &Path, delta: f64, out: Option<&Path>) -> Result<Metrics> {
    let est = io::read_tum(est)?;
    let truth = io::read_tum(truth)?;
    let m = evaluate(&est, &truth, delta)?;
    if let Some(out) = out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        io::write_json(&out.join(METRICS_FILE), &m)?;
    }
    Ok(m)
}

/// Config file (if any), then environment overrides.
pub fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    let base = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    Ok(base.with_env()?)
}
