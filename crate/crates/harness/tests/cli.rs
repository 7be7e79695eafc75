use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn mfsim(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mfsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn scheme_compare_writes_artifacts_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = mfsim(&["scheme-compare", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(dir.path());
    assert_eq!(m["command"], "scheme_compare");
    assert_eq!(m["passed"], true);
    assert_eq!(m["config"]["preset"], "appendixB");
    let table = fs::read_to_string(dir.path().join("scheme_compare_dt0.1.csv")).unwrap();
    assert!(table.starts_with("scheme,step,position,weight"));
    assert_eq!(table.lines().filter(|l| l.starts_with("tilde,2,")).count(), 6);
}

#[test]
fn metrics_check_honors_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("m.toml");
    fs::write(&cfg, "metric_pairs = 7\nmetric_radius = 2.0\nseed = 11\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = mfsim(&[
        "metrics-check",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("metrics_check_report.json")).unwrap()).unwrap();
    assert_eq!(report["inequalities"]["pairs"], 7);
    assert_eq!(report["inequalities"]["violations"], 0);
    assert!(manifest(&out_dir)["wall_clock_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn micro_run_from_small_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("micro.toml");
    fs::write(&cfg, "n_list = [8]\nhorizon = 0.5\nmicro_dt = 0.01\n").unwrap();
    let out = mfsim(&["micro", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("micro_N8.csv")).unwrap();
    assert!(csv.lines().next().unwrap().starts_with("t,i,"));
    assert!(dir.path().join("micro_N8.svg").exists());
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("micro_N8_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["N"], 8);
}

#[test]
fn bad_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "grid = 0\n").unwrap();
    let out = mfsim(&["macro", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid"));
}

#[test]
fn missing_config_file_is_an_error() {
    let out = mfsim(&["micro", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(out.status.code(), Some(1));
}
