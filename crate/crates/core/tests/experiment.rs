use std::fs;

use doc_tuner::experiment::{report, run_matrix, write_outputs, ExperimentConfig};
use doc_tuner::metrics::AccuracyMatrix;
use doc_tuner::trainer::Method;

fn small() -> ExperimentConfig {
    ExperimentConfig {
        methods: vec![Method::Doc, Method::SeqLora],
        seeds: vec![3, 4],
        tasks: 3,
        steps_per_task: 80,
        samples_train: 300,
        samples_eval: 200,
        ..ExperimentConfig::default()
    }
}

#[test]
fn empty_json_is_the_default_config() {
    let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    let nested: ExperimentConfig = serde_json::from_str(r#"{"network": {"rank": 8}, "pca": {"amnesic": 3.0}}"#).unwrap();
    assert_eq!(nested.network.rank, 8);
    assert_eq!(nested.network.hidden_dim, 64);
    assert_eq!(nested.pca.amnesic, 3.0);
    assert!(serde_json::from_str::<ExperimentConfig>(r#"{"learning_rate": 1}"#).is_err());
    let methods: ExperimentConfig = serde_json::from_str(r#"{"methods": ["doc_ablation", "per_task_reference"]}"#).unwrap();
    assert_eq!(methods.methods, vec![Method::DocAblation, Method::PerTaskReference]);
}

#[test]
fn validation_rejects_degenerate_configs() {
    for bad in [
        ExperimentConfig { seeds: vec![], ..small() },
        ExperimentConfig { tasks: 0, ..small() },
        ExperimentConfig { seeds: vec![1, 1], ..small() },
        ExperimentConfig { lr: f64::NAN, ..small() },
        ExperimentConfig { samples_eval: 0, ..small() },
    ] {
        assert!(bad.validate().unwrap_err().is_validation());
    }
}

#[test]
fn outputs_round_trip_through_report() {
    let cfg = small();
    let outcomes = run_matrix(&cfg).unwrap();
    assert_eq!(outcomes.len(), 4);
    let dir = tempfile::tempdir().unwrap();
    let summary = write_outputs(dir.path(), &outcomes).unwrap();

    for name in ["accuracy_matrix.csv", "summary.json", "logs.csv", "checkpoint.bin", "reference.csv"] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
    for run in ["doc-seed3", "doc-seed4", "seq_lora-seed3", "seq_lora-seed4"] {
        assert!(dir.path().join(run).join("accuracy_matrix.csv").is_file());
    }
    let logs = fs::read_to_string(dir.path().join("logs.csv")).unwrap();
    assert_eq!(logs.lines().next(), Some("step,task,loss,residual_rate,component_count,epsilon"));
    assert_eq!(logs.lines().count(), 1 + 3 * 80);

    // Top-level files mirror the first run.
    let matrix = AccuracyMatrix::read_csv(fs::File::open(dir.path().join("accuracy_matrix.csv")).unwrap()).unwrap();
    let mut expected = outcomes[0].record.accuracy_matrix.clone();
    let reference = expected.reference().map(<[f64]>::to_vec);
    assert!(reference.is_some());
    let mut parsed = matrix.clone();
    parsed.set_reference(reference.unwrap()).unwrap();
    assert_eq!(parsed, expected);
    expected = parsed;
    assert_eq!(expected.summary().unwrap().aa, summary.runs[0].aa);

    let check = report(dir.path()).unwrap();
    assert!(check.mismatches.is_empty());
    assert_eq!(check.recomputed, summary);
}

#[test]
fn report_detects_tampering() {
    let cfg = ExperimentConfig {
        methods: vec![Method::SeqLora],
        seeds: vec![1],
        ..small()
    };
    let outcomes = run_matrix(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(dir.path(), &outcomes).unwrap();
    let path = dir.path().join("seq_lora-seed1").join("accuracy_matrix.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines[1] = "1,1,0.123".to_string();
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let check = report(dir.path()).unwrap();
    assert_eq!(check.mismatches, vec!["seq_lora-seed1".to_string()]);
}

#[test]
fn matrix_is_independent_of_thread_count() {
    let cfg = ExperimentConfig {
        seeds: vec![5],
        tasks: 2,
        ..small()
    };
    let a = run_matrix(&cfg).unwrap();
    let b = run_matrix(&cfg).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.summary.aa, y.summary.aa);
        assert_eq!(x.record.logs, y.record.logs);
    }
}
