use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn doc_tuner(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_doc-tuner"))
        .args(args)
        .env("DOC_TUNER_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("c.json");
    fs::write(
        &path,
        r#"{"methods": ["doc", "seq_lora"], "seeds": [0, 1], "tasks": 2, "steps_per_task": 50, "samples_train": 200, "samples_eval": 100}"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_the_result_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = dir.path().join("results");
    let o = doc_tuner(&["run", "--config", &config, "--seed", "7", "--out", out.to_str().unwrap(), "--time"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["accuracy_matrix.csv", "summary.json", "logs.csv", "checkpoint.bin"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    // --seed replaces the configured seed list.
    assert!(out.join("doc-seed7").is_dir());
    assert!(!out.join("doc-seed0").exists());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("mean step"));

    let r = doc_tuner(&["report", "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("all metrics match"));
}

#[test]
fn method_and_task_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = dir.path().join("r");
    let o = doc_tuner(&[
        "run", "--config", &config, "--method", "doc-ablation", "--tasks", "1", "--quiet", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let runs = summary["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    assert!(runs.iter().all(|r| r["method"] == "doc_ablation" && r["bwt"].is_null()));
}

#[test]
fn pca_selftest_passes() {
    let o = doc_tuner(&["pca-selftest"]);
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("component")).count(), 3);
    assert!(stdout.contains("pass"));
}

#[test]
fn drift_probe_writes_series() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = dir.path().join("d");
    let o = doc_tuner(&["drift-probe", "--config", &config, "--seed", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("drift-doc-seed3.json").is_file());
    let csv = fs::read_to_string(out.join("drift-doc-seed3.csv")).unwrap();
    assert!(csv.starts_with("step,task,series,mean,std,count"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("end of task 2"));
}

#[test]
fn missing_config_is_a_validation_error() {
    let o = doc_tuner(&["run", "--config", "/definitely/not/here.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/definitely/not/here.json"));
}

#[test]
fn unknown_flag_prints_usage() {
    let o = doc_tuner(&["run", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = doc_tuner(&["explode"]);
    assert_eq!(o.status.code(), Some(1));
    let o = doc_tuner(&[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn invalid_values_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"lr": -0.5}"#).unwrap();
    let o = doc_tuner(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    fs::write(&bad, "{not json").unwrap();
    let o = doc_tuner(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = doc_tuner(&["run", "--method", "ewc"]);
    assert_eq!(o.status.code(), Some(1));
    let o = doc_tuner(&["run", "--tasks", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_thread_cap_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_doc-tuner"))
        .args(["run", "--config", &config, "--out", dir.path().join("x").to_str().unwrap()])
        .env("DOC_TUNER_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("DOC_TUNER_THREADS"));
}

#[test]
fn report_on_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = doc_tuner(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("summary.json"));
}

#[test]
fn help_exits_zero() {
    let o = doc_tuner(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("pca-selftest"));
}
