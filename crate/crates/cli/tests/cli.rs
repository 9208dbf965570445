use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{"domain": {"nx": 4, "ny": 2, "nz": 2, "lx": 2.0, "ly": 1.0, "lz": 1.0}}"#;

fn topo3d(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_topo3d")).current_dir(dir).args(args).output().unwrap()
}

fn error_doc(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).expect("json error line");
    serde_json::from_str(line).unwrap()
}

#[test]
fn help_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = topo3d(dir.path(), &["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("build-dataset"));
}

#[test]
fn bad_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = topo3d(dir.path(), &["sample", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let doc = error_doc(&out);
    assert_eq!(doc["error"], "usage");
    assert_eq!(doc["exit_code"], 2);
}

#[test]
fn missing_config_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = topo3d(dir.path(), &["--config", "nope.json", "sample"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_doc(&out)["error"], "input");
}

#[test]
fn unknown_config_field_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"simp": {"penalty": 3}}"#).unwrap();
    let out = topo3d(dir.path(), &["--config", "c.json", "sample"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_doc(&out)["error"], "config");
}

#[test]
fn out_of_range_setting_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = topo3d(dir.path(), &["hybrid", "--model", "m.ckpt", "--threshold", "1.5"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn missing_dataset_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = topo3d(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(4));
    let out = topo3d(dir.path(), &["train", "--dataset", "absent"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn sample_writes_problems_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), TINY).unwrap();
    let out = topo3d(dir.path(), &["--config", "c.json", "--seed", "40", "--out", "o", "sample", "--count", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for seed in 40..43 {
        assert!(dir.path().join(format!("o/problem-{seed}.json")).exists());
    }
    let prov: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("o/provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["command"], "sample");
    assert_eq!(prov["seed"], 40);
    assert_eq!(prov["problem_seeds"], serde_json::json!([40, 41, 42]));
    assert_eq!(prov["config"]["domain"]["nx"], 4);
}

#[test]
fn solve_then_map_process() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), TINY).unwrap();
    let out = topo3d(dir.path(), &["--config", "c.json", "--out", "s", "solve"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["problem.json", "trace.fields", "compliance.csv", "status.json", "final.vtk", "provenance.json"] {
        assert!(dir.path().join("s").join(f).exists(), "{f}");
    }
    let out = topo3d(dir.path(), &["--config", "c.json", "--out", "m", "map-process", "--trace", "s"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cutoff: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("m/cutoff.json")).unwrap()).unwrap();
    assert_eq!(cutoff["tau"], 0.05);
    let rows = fs::read_to_string(dir.path().join("m/binary_accuracy.csv")).unwrap().lines().count();
    assert_eq!(rows, cutoff["iterations"].as_u64().unwrap() as usize + 2);
}
