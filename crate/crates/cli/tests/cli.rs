use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qre(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qre"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .env_remove("QRE_OUT_DIR")
        .output()
        .expect("run qre")
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let k = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(k).unwrap().to_string()).collect()
}

#[test]
fn solve_writes_every_output_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("pd.toml");
    let game = qre_core::scenarios::prisoners_dilemma();
    fs::write(&cfg, qre_core::game::GameConfig::from_game(&game).to_toml().unwrap()).unwrap();
    let out = dir.path().join("run");
    let args = ["solve", "--game", cfg.to_str().unwrap(), "--lambda", "2", "--mode", "exact", "--iters", "5000", "--seed", "7"];
    let o = qre(&args, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["trace.csv", "policy.csv", "diagnostics.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    let listed: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|e| e["file"].as_str().unwrap()).collect();
    assert_eq!(listed, ["trace.csv", "policy.csv", "diagnostics.csv"]);
    let bytes = fs::read(out.join("trace.csv")).unwrap();
    assert_eq!(manifest["outputs"][0]["bytes"], bytes.len());
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(column(&trace, "k").last().unwrap(), "5000");
}

#[test]
fn unknown_game_is_a_config_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = qre(&["solve", "--game", "no_such_game"], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "discount = 2.0\n[[agents]]\n").unwrap();
    let out = dir.path().join("run");
    let o = qre(&["solve", "--game", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn corrupt_behavior_data_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    fs::write(&data, "state_id,agent_id,action_id\n0,0,7\n").unwrap();
    let o = qre(&["calibrate", "--game", "three_action", "--data", data.to_str().unwrap()], &dir.path().join("cal"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missed_tolerance_exits_three_with_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = qre(&["solve", "--game", "pd", "--lambda", "5", "--iters", "20", "--tol", "1e-9"], &out);
    assert_eq!(o.status.code(), Some(3));
    assert!(out.join("trace.csv").exists() && out.join("policy.csv").exists());
}

#[test]
fn unwritable_output_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let o = qre(&["solve", "--game", "pd", "--iters", "10"], &blocker.join("run"));
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn stored_oracle_solution_has_negligible_gap() {
    let dir = tempfile::tempdir().unwrap();
    let solved = dir.path().join("solved");
    let o = qre(&["solve", "--game", "three_action", "--lambda", "3", "--mode", "oracle"], &solved);
    assert!(o.status.success());
    let policy = solved.join("policy.csv");
    let eval = dir.path().join("eval");
    let o = qre(&["metrics", "evaluate", "--game", "three_action", "--policy", policy.to_str().unwrap()], &eval);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let diag = fs::read_to_string(eval.join("diagnostics.csv")).unwrap();
    let gap: f64 = column(&diag, "qre_gap")[0].parse().unwrap();
    assert!(gap <= 1e-10, "gap {gap}");
}

#[test]
fn synthetic_calibration_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("synth");
    assert!(qre(&["synth", "--game", "three_action", "--lambda", "5", "--steps", "10000"], &synth).status.success());
    let data = synth.join("behavior.csv");
    let cal = dir.path().join("cal");
    assert!(qre(&["calibrate", "--game", "three_action", "--data", data.to_str().unwrap()], &cal).status.success());
    let summary = fs::read_to_string(cal.join("calibration_summary.csv")).unwrap();
    let star: f64 = column(&summary, "lambda_star")[0].parse().unwrap();
    assert!((star - 5.0).abs() <= 0.5, "λ* = {star}");
    let curve = fs::read_to_string(cal.join("nll_curve.csv")).unwrap();
    assert_eq!(column(&curve, "kind").iter().filter(|k| *k == "grid").count(), 7);
}

#[test]
fn sweep_table_has_one_row_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let o = qre(&["sweep", "--scenario", "intersection", "--lambda-grid", "0,2,10", "--iters", "2000", "--episodes", "500"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(column(&table, "lambda"), ["0.0", "2.0", "10.0"]);
}

#[test]
fn summarize_reads_back_solver_traces() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(qre(&["solve", "--game", "coordination", "--lambda", "2", "--iters", "2000"], &run).status.success());
    let trace = run.join("trace.csv");
    let sum = dir.path().join("sum");
    assert!(qre(&["metrics", "summarize", "--trace", trace.to_str().unwrap()], &sum).status.success());
    let table = fs::read_to_string(sum.join("summary.csv")).unwrap();
    assert_eq!(column(&table, "iterations"), ["2000"]);
}

#[test]
fn out_dir_defaults_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_qre"))
        .args(["continuous", "--iters", "100", "--particles", "20"])
        .env("QRE_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("density.csv").exists());
    assert!(dir.path().join("continuous_summary.csv").exists());
}
