//! Drives the `posebench` binary through every stage via files.

use std::path::Path;
use std::process::{Command, Output};

fn posebench(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posebench")).args(args).current_dir(dir).output().expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = posebench(args, dir);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-traj", "--frames", "8", "--seed", "4", "-o", "traj.json"], d);
    ok(&["synth", "--trajectory", "traj.json", "--points", "200", "-o", "gt_tracks.json"], d);
    ok(&["corrupt", "--tracks", "gt_tracks.json", "--sigma", "0.5", "--seed", "1", "-o", "tracks.json"], d);
    ok(&["select", "--tracks", "tracks.json", "--strategy", "by_ranking", "-o", "kept.json"], d);
    ok(&["estimate", "--tracks", "tracks.json", "--selection", "kept.json", "-o", "recon.json"], d);
    let score: serde_json::Value =
        serde_json::from_str(&ok(&["evaluate", "--reconstruction", "recon.json", "--trajectory", "traj.json"], d))
            .unwrap();
    assert_eq!(score["registered"], true, "{score}");
    assert!(score["metrics"]["rpe_rot"].as_f64().unwrap() < 1.0, "{score}");

    let traj: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("traj.json")).unwrap()).unwrap();
    assert_eq!(traj["convention"], "world_to_camera");
    assert_eq!(traj["frames"].as_array().unwrap().len(), 8);
}

#[test]
fn noiseless_stages_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-traj", "--frames", "8", "-o", "traj.json"], d);
    ok(&["synth", "--trajectory", "traj.json", "-o", "tracks.json"], d);
    ok(&["estimate", "--tracks", "tracks.json", "-o", "recon.json"], d);
    ok(&["evaluate", "--reconstruction", "recon.json", "--trajectory", "traj.json", "-o", "score.json"], d);
    let score: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("score.json")).unwrap()).unwrap();
    assert!(score["metrics"]["ate"].as_f64().unwrap() < 1e-6, "{score}");
}

#[test]
fn bench_is_deterministic_and_reportable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), r#"{"seeds": [0, 1, 2], "strategy": "by_ranking", "method": "ranked"}"#)
        .unwrap();
    let table = ok(&["bench", "--config", "cfg.json", "--out", "a"], d);
    assert!(table.starts_with("method,metric,threshold,ap,num_windows,num_failures\n"));
    assert!(table.lines().skip(1).all(|l| l.starts_with("ranked,")));
    ok(&["bench", "--config", "cfg.json", "--out", "b"], d);
    for f in ["report.json", "ap_table.csv", "plot_data.csv"] {
        assert_eq!(
            std::fs::read(d.join("a").join(f)).unwrap(),
            std::fs::read(d.join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }

    ok(&["bench", "--seed", "0", "--seed", "1", "--seed", "2", "--strategy", "none", "--out", "c"], d);
    let combined = ok(&["report", "a", "c/report.json"], d);
    let methods: std::collections::BTreeSet<&str> =
        combined.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods.into_iter().collect::<Vec<_>>(), vec!["none", "ranked"]);

    std::fs::write(d.join("thr.json"), r#"{"ate": [0.5]}"#).unwrap();
    ok(&["report", "a", "--thresholds", "thr.json", "--out", "r"], d);
    let rescored = std::fs::read_to_string(d.join("r").join("ap_table.csv")).unwrap();
    assert!(rescored.contains("ranked,ate,0.5,"), "{rescored}");
    assert!(d.join("r").join("plot_data.csv").is_file());
}

#[test]
fn configuration_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), r#"{"seeds": []}"#).unwrap();
    assert!(!posebench(&["bench", "--config", "bad.json"], d).status.success());
    std::fs::write(d.join("unknown.json"), r#"{"sedes": [1]}"#).unwrap();
    assert!(!posebench(&["bench", "--config", "unknown.json"], d).status.success());
    assert!(!posebench(&["gen-traj", "--mode", "zigzag", "-o", "t.json"], d).status.success());
    assert!(!posebench(&["synth", "--trajectory", "missing.json", "-o", "x.json"], d).status.success());
}
