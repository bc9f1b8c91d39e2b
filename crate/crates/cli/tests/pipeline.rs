//! End-to-end runs of the smoke configuration.

use std::path::Path;

use scion_cli::config::{ExperimentConfig, ScionNorm, StudentInit};
use scion_cli::metrics::MetricsLog;
use scion_cli::pipeline::{run_pipeline, Step};

fn smoke(out: &Path) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let mut cfg = ExperimentConfig::from_path(&path).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn rows(dir: &Path) -> Vec<(String, usize, f64, Option<f64>)> {
    let log = MetricsLog::in_dir(dir);
    log.read().unwrap().into_iter().map(|r| (r.unit, r.epoch, r.loss, r.test_acc)).collect()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let full = run_pipeline(smoke(&a), false, Step::Baseline).unwrap();
    run_pipeline(smoke(&b), false, Step::Stage1).unwrap();
    assert!(run_pipeline(smoke(&b), false, Step::Baseline).is_err(), "existing run needs resume");
    // Drop the last stage-1 unit and its rows, as if the run died mid-unit.
    std::fs::remove_dir_all(b.join("stage1/block4")).unwrap();
    let csv = std::fs::read_to_string(b.join("metrics.csv")).unwrap();
    let kept: String = csv.lines().filter(|l| !l.starts_with("block4,")).map(|l| format!("{l}\n")).collect();
    std::fs::write(b.join("metrics.csv"), kept).unwrap();
    let resumed = run_pipeline(smoke(&b), true, Step::Baseline).unwrap();
    assert_eq!(full.metrics, resumed.metrics);
    assert_eq!(rows(&a).len(), rows(&b).len());
    let mut ra = rows(&a);
    let mut rb = rows(&b);
    ra.sort_by(|x, y| x.partial_cmp(y).unwrap());
    rb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    assert_eq!(ra, rb);
}

#[test]
fn resume_refuses_a_changed_config() {
    let tmp = tempfile::tempdir().unwrap();
    run_pipeline(smoke(tmp.path()), false, Step::Teacher).unwrap();
    let mut cfg = smoke(tmp.path());
    cfg.k = 1;
    assert!(run_pipeline(cfg, true, Step::Stage1).is_err());
}

#[test]
fn teacher_copy_pipeline_reproduces_the_teacher() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = smoke(tmp.path());
    cfg.student.init = StudentInit::TeacherCopy;
    cfg.student.width = cfg.teacher.width;
    cfg.scion_norm = ScionNorm::Running;
    cfg.baseline.enabled = false;
    let m = run_pipeline(cfg, false, Step::Baseline).unwrap();
    assert_eq!(m.metrics["student.test_acc"], m.metrics["teacher.test_acc"]);
    for l in 1..=4 {
        assert_eq!(m.metrics[&format!("stage1.block{l}.test_acc")], m.metrics["teacher.test_acc"]);
    }
}
