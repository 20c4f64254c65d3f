use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_modcurv"))
}

fn scratch(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("modcurv-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("terminated by signal")
}

#[test]
fn kernels_emit_one_row_per_grid_point() {
    let o = bin().args(["kernels", "--which", "K0", "--grid", "-2:2:0.5"]).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = String::from_utf8(o.stdout).unwrap();
    assert_eq!(csv.lines().count(), 1 + 9);
}

#[test]
fn configuration_errors_exit_with_two() {
    let o = bin().args(["kernels", "--which", "nope", "--grid", "0:1:0.5"]).output().unwrap();
    assert_eq!(code(&o), 2);
    let d = scratch("cfg");
    let bad = write(&d, "bad.json", r#"{"tolerances": {"gauss_bonnet": 0}}"#);
    let o = bin().arg("--config").arg(&bad).args(["suite", "identities"]).output().unwrap();
    assert_eq!(code(&o), 2);
    let garbled = write(&d, "garbled.json", "{ not json");
    let o = bin().arg("--config").arg(&garbled).args(["suite", "identities"]).output().unwrap();
    assert_eq!(code(&o), 2);
    let o = bin().args(["suite", "no-such-suite"]).output().unwrap();
    assert_eq!(code(&o), 2);
    std::fs::remove_dir_all(d).ok();
}

#[test]
fn ambiguous_calibration_exits_with_three() {
    let d = scratch("cal");
    let cfg = write(&d, "loose.json", r#"{"tolerances": {"calibration": 1000.0}}"#);
    let out = d.join("conventions.json");
    let o = bin().arg("--config").arg(&cfg).arg("calibrate").arg("--write").arg(&out).output().unwrap();
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
    std::fs::remove_dir_all(d).ok();
}

#[test]
fn flat_curvature_vanishes() {
    let d = scratch("flat");
    let h = write(&d, "h.json", r#"{"theta": 0.6180339887498949, "tau": [0.3, 1.1], "coeffs": [], "selfadjoint": true}"#);
    let o = bin().args(["curvature", "--trunc", "6", "--input"]).arg(&h).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["data"]["gauss_bonnet_residual"].as_f64().unwrap().abs() < 1e-14);
    std::fs::remove_dir_all(d).ok();
}

#[test]
fn suite_writes_valid_reports() {
    let d = scratch("suite");
    let o = bin().arg("--out").arg(&d).args(["suite", "identities"]).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.lines().any(|l| l.starts_with("PASS")));
    let json = std::fs::read_to_string(d.join("suite_identities.json")).unwrap();
    let r = modcurv::lab::validate_report_json(&json).unwrap();
    assert!(r.passed());
    assert_eq!(r.command, "suite identities");
    std::fs::remove_dir_all(d).ok();
}
