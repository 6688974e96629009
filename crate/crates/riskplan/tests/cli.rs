//! CLI contract tests for the cheap error paths; artifact-producing runs are
//! exercised by the acceptance suite.

mod common;

use std::process::Command;

fn riskplan() -> Command {
    Command::new(env!("CARGO_BIN_EXE_riskplan"))
}

#[test]
fn malformed_config_exits_2_with_field_path() {
    let text = std::fs::read_to_string(common::unicycle_scenario_path()).unwrap();
    let broken = text.replace("q_diag", "q_diag_oops");
    let dir = std::env::temp_dir().join("riskplan-cli-broken");
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("broken.cfg");
    std::fs::write(&cfg, broken).unwrap();

    let output = riskplan()
        .args(["plan", "--scenario"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("q_diag"), "diagnostic lacks field path: {stderr}");
}

#[test]
fn mc_rejects_zero_trials() {
    let output = riskplan()
        .args(["mc", "--scenario"])
        .arg(common::unicycle_scenario_path())
        .args(["--reference", "/nonexistent.csv", "--trials", "0", "--out", "/tmp/riskplan-unused"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn mc_missing_reference_exits_3() {
    let output = riskplan()
        .args(["mc", "--scenario"])
        .arg(common::unicycle_scenario_path())
        .args(["--reference", "/nonexistent.csv", "--trials", "5", "--out", "/tmp/riskplan-unused"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
}

#[test]
fn report_on_empty_directory_exits_3() {
    let dir = std::env::temp_dir().join("riskplan-cli-empty");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let output = riskplan().args(["report", "--out"]).arg(&dir).output().unwrap();
    assert_eq!(output.status.code(), Some(3));
}

#[test]
fn unknown_flag_exits_2() {
    let output = riskplan().args(["plan", "--bogus"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}
