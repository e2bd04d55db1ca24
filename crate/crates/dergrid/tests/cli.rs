//! The `dergrid` binary end to end.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dergrid::tools::ModelJson;
use serde_json::Value;

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn dergrid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dergrid")).args(args).output().unwrap()
}

fn short_tracking(dir: &Path, steps: usize) -> PathBuf {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(scenarios().join("four_node_tracking.json")).unwrap()).unwrap();
    v["sim"]["duration"] = Value::from(steps);
    std::fs::copy(scenarios().join("four_node_tracking.csv"), dir.join("four_node_tracking.csv")).unwrap();
    let p = dir.join("tracking.json");
    std::fs::write(&p, v.to_string()).unwrap();
    p
}

#[test]
fn run_then_certify() {
    let dir = tempfile::tempdir().unwrap();
    let sc = short_tracking(dir.path(), 30);
    let out = dir.path().join("out");
    let run = dergrid(&["run", "--scenario", sc.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stderr).contains("PASS"));
    assert!(out.join("summary.csv").exists());

    let cert = dergrid(&["certify", "--log", out.join("runlog.jsonl").to_str().unwrap()]);
    assert!(cert.status.success());
    let csv = String::from_utf8(cert.stdout).unwrap();
    assert!(csv.starts_with("k,gap,bound,margin\n"));
    assert_eq!(csv.lines().count(), 31);
}

#[test]
fn bad_scenario_exits_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("broken.json");
    std::fs::write(&p, "{\"base\": 1}").unwrap();
    let out = dergrid(&["run", "--scenario", p.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn powerflow_prints_head_and_nodes() {
    let sc = scenarios().join("four_node_static.json");
    let inj = scenarios().join("four_node_injections.csv");
    let out = dergrid(&["powerflow", "--scenario", sc.to_str().unwrap(), "--injections", inj.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3 + 3);
    // node 3 carries 800 kW of load less 300 kW of generation
    let n3 = rows.iter().find(|r| r[0] == "3").unwrap();
    assert!((n3[4].parse::<f64>().unwrap() + 500.0).abs() < 1e-3);
    let head: f64 = rows[0][4].parse().unwrap();
    assert!(head > 1000.0 && head < 1050.0, "{head}");
}

#[test]
fn linearize_dumps_row_major_model() {
    let sc = scenarios().join("four_node_static.json");
    let out = dergrid(&["linearize", "--scenario", sc.to_str().unwrap()]);
    assert!(out.status.success());
    let model: ModelJson = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(model.units.len(), 3);
    let a = &model.units[0].a;
    assert_eq!((a.rows, a.cols, a.data.len()), (3, 2, 6));
    // injecting real power at node 3 raises every voltage, most at node 3
    let dv_dp: Vec<f64> = (0..3).map(|r| a.data[2 * r]).collect();
    assert!(dv_dp.iter().all(|&d| d > 0.0));
    assert!(dv_dp[2] > dv_dp[1] && dv_dp[1] > dv_dp[0]);
}
