//! Drives the `ctlio` binary end to end.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::process::{Command, Output};

use ctlio_core::config::{Mode, RunConfig};
use ctlio_core::io::{read_tum, write_tum};
use ctlio_core::lie::Pose3;
use ctlio_core::odometry::STAGE_NAMES;
use nalgebra::Vector3;

fn ctlio(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ctlio"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn file_hash(path: &Path) -> u64 {
    let mut h = DefaultHasher::new();
    fs::read(path).unwrap().hash(&mut h);
    h.finish()
}

fn simulate(preset: &str, dir: &Path, extra: &[&str]) {
    let mut args = vec!["simulate", preset, "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    ok(&ctlio(&args, &[]));
}

#[test]
fn minimal_dataset_has_streams_truth_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    simulate("minimal", &a, &[]);
    for f in ["imu.csv", "lidar_0.csv", "truth.tum", "manifest.json"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    simulate("minimal", &b, &[]);
    simulate("minimal", &c, &["--seed", "99"]);
    for f in ["imu.csv", "lidar_0.csv", "truth.tum", "manifest.json"] {
        assert_eq!(file_hash(&a.join(f)), file_hash(&b.join(f)), "{f}");
    }
    assert_ne!(file_hash(&a.join("imu.csv")), file_hash(&c.join("imu.csv")));
}

#[test]
fn scenario_file_is_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let mut s = ctlio_sim::Scenario::preset("minimal").unwrap();
    s.duration = 0.5;
    let spec = tmp.path().join("scenario.json");
    fs::write(&spec, s.to_json()).unwrap();
    let out = tmp.path().join("ds");
    ok(&ctlio(&["simulate", "--config", spec.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]));
    assert!(out.join("manifest.json").is_file());
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert!(!ctlio(&["simulate", bad.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]).status.success());
}

#[test]
fn run_writes_outputs_and_round_trips_its_config() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    simulate("minimal", &ds, &[]);
    let (o1, o2) = (tmp.path().join("o1"), tmp.path().join("o2"));
    let args = |o: &Path| vec!["run".to_string(), ds.display().to_string(), "--mode".into(), "UNC".into(), "--out".into(), o.display().to_string()];
    let a1: Vec<String> = args(&o1);
    let stdout = ok(&ctlio(&a1.iter().map(String::as_str).collect::<Vec<_>>(), &[("CTLIO_KNN", "6"), ("CTLIO_FIC__TAU", "0.8")]));
    let metrics: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    for k in ["ATE_t", "ATE_r", "RTE_t", "RTE_r"] {
        assert!(metrics[k].as_f64().unwrap().is_finite(), "{k}");
    }
    for f in ["trajectory.tum", "map.ply", "timing.json", "frames.json", "metrics.json", "config.json"] {
        assert!(o1.join(f).is_file(), "{f}");
    }

    let text = fs::read_to_string(o1.join("config.json")).unwrap();
    let cfg = RunConfig::from_json(&text).unwrap();
    assert_eq!(cfg.mode, Mode::Unc);
    assert_eq!(cfg.knn, 6);
    assert_eq!(cfg.fic.tau, 0.8);
    assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);

    let timing: serde_json::Value = serde_json::from_str(&fs::read_to_string(o1.join("timing.json")).unwrap()).unwrap();
    let frames = timing.as_array().unwrap();
    assert!(!frames.is_empty());
    for f in frames {
        let stages = f["stages"].as_object().unwrap();
        let mut keys: Vec<&str> = stages.keys().map(String::as_str).collect();
        keys.sort_unstable();
        let mut want = STAGE_NAMES.to_vec();
        want.sort_unstable();
        assert_eq!(keys, want);
    }

    let ply = fs::read_to_string(o1.join("map.ply")).unwrap();
    assert!(ply.starts_with("ply\nformat ascii 1.0"));
    assert!(ply.contains("property double trace"));

    // same inputs and config give the same trajectory
    let a2: Vec<String> = args(&o2);
    ok(&ctlio(&a2.iter().map(String::as_str).collect::<Vec<_>>(), &[("CTLIO_KNN", "6"), ("CTLIO_FIC__TAU", "0.8")]));
    assert_eq!(read_tum(&o1.join("trajectory.tum")).unwrap(), read_tum(&o2.join("trajectory.tum")).unwrap());
}

#[test]
fn config_file_then_environment_then_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    simulate("minimal", &ds, &[]);
    let file = tmp.path().join("cfg.json");
    fs::write(&file, r#"{"mode": "CNT", "knn": 7, "max_iter": 3}"#).unwrap();
    let out = tmp.path().join("out");
    ok(&ctlio(
        &["run", ds.to_str().unwrap(), "--config", file.to_str().unwrap(), "--mode", "F-UNC", "--out", out.to_str().unwrap()],
        &[("CTLIO_MAX_ITER", "4"), ("CTLIO_MODE", "RAW")],
    ));
    let cfg = RunConfig::from_json(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!((cfg.mode, cfg.knn, cfg.max_iter), (Mode::FUnc, 7, 4));
}

#[test]
fn bad_inputs_fail_loudly() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    simulate("minimal", &ds, &[]);
    let out = tmp.path().join("out");
    let run = |env: &[(&str, &str)]| ctlio(&["run", ds.to_str().unwrap(), "--out", out.to_str().unwrap()], env);
    let unknown = run(&[("CTLIO_NOT_A_KEY", "1")]);
    assert!(!unknown.status.success());
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("CTLIO_NOT_A_KEY"));
    assert!(!run(&[("CTLIO_KNN", "many")]).status.success());
    assert!(!ctlio(&["run", tmp.path().join("missing").to_str().unwrap()], &[]).status.success());
    assert!(!ctlio(&["run", ds.to_str().unwrap(), "--mode", "BOGUS"], &[]).status.success());
    assert!(!out.join("trajectory.tum").exists());
}

fn square(scale: f64) -> Vec<(f64, Pose3)> {
    [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
        .iter()
        .enumerate()
        .map(|(i, (x, y))| (i as f64, Pose3::from_translation(Vector3::new(x * scale, y * scale, 0.0))))
        .collect()
}

fn eval(tmp: &Path, est: &[(f64, Pose3)], truth: &[(f64, Pose3)]) -> Output {
    let (e, t) = (tmp.join("est.tum"), tmp.join("truth.tum"));
    write_tum(&e, est).unwrap();
    write_tum(&t, truth).unwrap();
    let out = tmp.join("eval");
    ctlio(&["eval", e.to_str().unwrap(), t.to_str().unwrap(), "--out", out.to_str().unwrap()], &[])
}

#[test]
fn eval_fixtures() {
    let tmp = tempfile::tempdir().unwrap();
    let truth = square(1.0);

    let m: serde_json::Value = serde_json::from_str(&ok(&eval(tmp.path(), &truth, &truth))).unwrap();
    for k in ["ATE_t", "ATE_r", "RTE_t", "RTE_r"] {
        assert!(m[k].as_f64().unwrap().abs() < 1e-9, "{k}: {}", m[k]);
    }

    // a 10% larger square: every corner ends 0.1·√2 from its match
    let m: serde_json::Value = serde_json::from_str(&ok(&eval(tmp.path(), &square(1.1), &truth))).unwrap();
    assert!((m["ATE_t"].as_f64().unwrap() - 0.1 * 2f64.sqrt()).abs() < 1e-9, "{m}");
    assert!(m["ATE_r"].as_f64().unwrap() < 1e-9);
    let written: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(written, m);

    let late: Vec<(f64, Pose3)> = truth.iter().map(|(t, p)| (t + 100.0, *p)).collect();
    let out = eval(tmp.path(), &late, &truth);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("overlap"));
}

/// Gates sized for noise-free returns; the defaults are sized for
/// centimetre range noise.
const EXACT_GATES: [(&str, &str); 2] = [("CTLIO_PLANE_THRESHOLD", "1e-4"), ("CTLIO_MAX_RESIDUAL", "1e-4")];

#[test]
fn noise_free_stationary_run_stays_at_the_origin() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    simulate("stationary", &ds, &[]);
    for mode in Mode::ALL {
        let out = tmp.path().join(mode.as_str());
        ok(&ctlio(&["run", ds.to_str().unwrap(), "--mode", mode.as_str(), "--out", out.to_str().unwrap()], &EXACT_GATES));
        let traj = read_tum(&out.join("trajectory.tum")).unwrap();
        assert!(traj.len() > 10);
        let worst = traj.iter().map(|(_, p)| p.trans.norm()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "{mode:?}: {worst}");
    }
}
