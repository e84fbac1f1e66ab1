use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn nettailor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nettailor"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn default_config() -> Value {
    let o = nettailor(&["config"]);
    assert!(o.status.success(), "{}", stderr(&o));
    serde_json::from_slice(&o.stdout).unwrap()
}

/// Defaults shrunk until the whole pipeline takes seconds.
fn small_config(out: &Path) -> Value {
    let mut cfg = default_config();
    cfg["out_dir"] = json!(out);
    cfg["plan"]["channels"] = json!([4, 4, 8, 8]);
    cfg["source"]["n_train"] = json!(200);
    cfg["source"]["n_test"] = json!(100);
    cfg["targets"] = json!([
        {"name": "easy", "kind": "synthetic", "difficulty": "easy", "n_train": 40, "n_test": 40},
    ]);
    cfg["window"] = json!({"limited": 2});
    cfg["n_values"] = json!([0, 1]);
    for phase in ["pretrain", "teacher", "student", "finetune"] {
        cfg[phase]["epochs"] = json!(1);
        cfg[phase]["batch_size"] = json!(32);
    }
    cfg
}

#[test]
fn verify_passes() {
    let o = nettailor(&["verify"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
}

#[test]
fn injected_sign_error_fails_verify() {
    let o = nettailor(&["verify", "--inject-sign-error"]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
}

#[test]
fn config_round_trips() {
    let cfg = default_config();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = nettailor(&["--config", path.to_str().unwrap(), "config"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(serde_json::from_slice::<Value>(&o.stdout).unwrap(), cfg);

    let o = nettailor(&["--seed", "7", "config"]);
    assert_eq!(
        serde_json::from_slice::<Value>(&o.stdout).unwrap()["seed"],
        json!(7)
    );
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    let mut cfg = default_config();
    cfg["n_values"] = json!([2, 1]);
    fs::write(&path, cfg.to_string()).unwrap();
    let o = nettailor(&["--config", path.to_str().unwrap(), "config"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("strictly ascending"), "{}", stderr(&o));
}

#[test]
fn empty_report_prints_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let o = nettailor(&["--out", dir.path().to_str().unwrap(), "report"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        stdout(&o).lines().collect::<Vec<_>>(),
        [nettailor::experiment::REPORT_CSV_HEADER]
    );
}

#[test]
fn missing_artifact_names_the_command() {
    let dir = tempfile::tempdir().unwrap();
    let o = nettailor(&["--out", dir.path().to_str().unwrap(), "pretrain"]);
    assert!(!o.status.success());
    assert!(
        stderr(&o).contains("run `gen-data` first"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn small_pipeline_phase_by_phase() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let path = dir.path().join("config.json");
    fs::write(&path, small_config(&out).to_string()).unwrap();
    let cfg = path.to_str().unwrap();
    for args in [
        vec!["gen-data"],
        vec!["pretrain"],
        vec!["teach", "--task", "easy"],
        vec!["tailor"],
        vec!["prune", "--task", "easy", "--n", "1"],
        vec!["sweep"],
    ] {
        let mut full = vec!["--config", cfg];
        full.extend(&args);
        let o = nettailor(&full);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let o = nettailor(&["--config", cfg, "report"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2, "{text}");
    assert!(lines[1].starts_with("easy,"));
    assert!(out.join("report").join("summary.csv").exists());
}
