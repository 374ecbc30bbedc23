use doc_tuner::drift::{cosine, drift_probe, DriftPoint, ProbeSettings};
use doc_tuner::experiment::ExperimentConfig;
use doc_tuner::trainer::Method;
use doc_tuner::Error;
use nalgebra::DVector;

fn config(lr: f64) -> ExperimentConfig {
    ExperimentConfig {
        tasks: 2,
        steps_per_task: 60,
        samples_train: 300,
        samples_eval: 100,
        lr,
        ..ExperimentConfig::default()
    }
}

fn all_cosines(p: &DriftPoint) -> Vec<f64> {
    p.grad_vs_first
        .iter()
        .chain(&p.grad_vs_mean)
        .chain(&p.coord_tracked)
        .chain(&p.coord_frozen)
        .flatten()
        .copied()
        .chain(p.b_column_similarity)
        .collect()
}

#[test]
fn first_probe_is_self_similar() {
    let cfg = config(0.02);
    let probe = drift_probe(&cfg.run_config(Method::Doc, 0), &cfg.task_specs(0), &ProbeSettings::default()).unwrap();
    assert_eq!(probe.anchor_indices.len(), 8);
    let first = &probe.points[0];
    assert_eq!(first.step, 0);
    for c in first.grad_vs_first.iter().chain(&first.grad_vs_mean) {
        assert_eq!(*c, Some(1.0));
    }
    assert!(first.coord_tracked.iter().all(Option::is_none));
}

#[test]
fn probe_schedule_and_cosine_range() {
    let cfg = config(0.02);
    let probe = drift_probe(&cfg.run_config(Method::Doc, 1), &cfg.task_specs(1), &ProbeSettings::default()).unwrap();
    let steps: Vec<u64> = probe.points.iter().map(|p| p.step).collect();
    let expected: Vec<u64> = (0..=120).step_by(10).collect();
    assert_eq!(steps, expected);
    for p in &probe.points {
        for c in all_cosines(p) {
            assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c), "cosine {c} out of range");
        }
    }
    // Coordinates exist only once the task-1 pool has been cloned.
    let end1 = probe.end_of_task(1).unwrap();
    assert!(end1.coord_tracked.iter().all(Option::is_none));
    let end2 = probe.end_of_task(2).unwrap();
    assert!(end2.coord_tracked.iter().all(Option::is_some));
    assert!(end2.b_column_similarity.is_some());
}

#[test]
fn frozen_network_shows_no_drift() {
    let cfg = config(0.0);
    let probe = drift_probe(&cfg.run_config(Method::Doc, 2), &cfg.task_specs(2), &ProbeSettings::default()).unwrap();
    for p in &probe.points {
        for c in &p.grad_vs_first {
            assert_eq!(*c, Some(1.0), "step {}", p.step);
        }
        // The running mean of identical gradients is only equal up to rounding.
        for c in &p.grad_vs_mean {
            assert!((c.unwrap() - 1.0).abs() < 1e-12, "step {}", p.step);
        }
        if p.task == 2 {
            assert_eq!(p.b_column_similarity, Some(1.0));
        }
    }
}

#[test]
fn negative_lr_is_still_rejected() {
    let cfg = config(-0.1);
    let err = drift_probe(&cfg.run_config(Method::Doc, 0), &cfg.task_specs(0), &ProbeSettings::default()).unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
}

#[test]
fn cosine_edge_cases() {
    let z = DVector::<f64>::zeros(3);
    let a = DVector::from_vec(vec![1.0, 2.0, 3.0]);
    assert_eq!(cosine(&z, &z), Some(1.0));
    assert_eq!(cosine(&z, &a), None);
    assert_eq!(cosine(&a, &(-&a)), Some(-1.0));
    assert_eq!(cosine(&a, &(&a * 3.0)).map(|c| (c - 1.0).abs() < 1e-15), Some(true));
}

#[test]
fn csv_has_one_row_per_defined_series() {
    let cfg = config(0.02);
    let probe = drift_probe(&cfg.run_config(Method::Doc, 0), &cfg.task_specs(0), &ProbeSettings::default()).unwrap();
    let mut buf = Vec::new();
    probe.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,task,series,mean,std,count"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.iter().filter(|r| r.starts_with("0,1,")).count(), 2);
    assert!(rows.iter().any(|r| r.starts_with("120,2,coord_frozen,")));
}
