use std::fs;
use std::path::Path;

use fairadapt_core::config::{ExperimentConfig, Stage};
use fairadapt_core::pipeline::{
    run_pipeline, run_pipeline_until, sweep, SweepAxis, EXPOSURE, METRICS, RESOLVED, SUBGROUPS, TRAIN_LOG,
};

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(&[
        "synthetic_users=40",
        "synthetic_items=60",
        "synthetic_providers=6",
        "synthetic_per_user=15",
        "pretrain_epochs=5",
        "epochs=2",
        "batch_size=20",
        "candidates=30",
    ])
    .unwrap();
    cfg.out_dir = dir.to_path_buf();
    cfg
}

fn read(dir: &Path, f: &str) -> Vec<u8> {
    fs::read(dir.join(f)).unwrap()
}

#[test]
fn rerun_with_same_config_skips_every_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let first = run_pipeline(&cfg).unwrap();
    assert_eq!(first.ran, Stage::ALL.to_vec());
    let outputs: Vec<_> = [METRICS, TRAIN_LOG, EXPOSURE, SUBGROUPS]
        .iter()
        .map(|f| read(tmp.path(), f))
        .collect();

    let second = run_pipeline(&cfg).unwrap();
    assert!(second.ran.is_empty());
    assert_eq!(second.skipped, Stage::ALL.to_vec());
    for (f, before) in [METRICS, TRAIN_LOG, EXPOSURE, SUBGROUPS].iter().zip(&outputs) {
        assert_eq!(&read(tmp.path(), f), before, "{f} changed");
    }
    let resolved = String::from_utf8(read(tmp.path(), RESOLVED)).unwrap();
    assert!(resolved.contains(&format!("# hash = {}", cfg.hash())));
}

#[test]
fn changing_an_adapt_key_reruns_from_adapt() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    run_pipeline(&cfg).unwrap();
    cfg.set("lambda_acc", "0.5").unwrap();
    let run = run_pipeline(&cfg).unwrap();
    assert_eq!(run.skipped, vec![Stage::Prepare, Stage::Pretrain]);
    assert_eq!(run.ran, vec![Stage::Adapt, Stage::Evaluate, Stage::Report]);
}

#[test]
fn changing_an_evaluate_key_keeps_training() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    run_pipeline(&cfg).unwrap();
    let log = read(tmp.path(), TRAIN_LOG);
    cfg.set("eval_k", "10").unwrap();
    let run = run_pipeline(&cfg).unwrap();
    assert_eq!(run.ran, vec![Stage::Evaluate, Stage::Report]);
    assert_eq!(read(tmp.path(), TRAIN_LOG), log);
}

#[test]
fn missing_output_forces_a_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    run_pipeline(&cfg).unwrap();
    fs::remove_file(tmp.path().join(METRICS)).unwrap();
    let run = run_pipeline(&cfg).unwrap();
    assert_eq!(run.ran, vec![Stage::Evaluate, Stage::Report]);
}

#[test]
fn stopping_early_leaves_later_stages_for_the_next_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let a = run_pipeline_until(&cfg, Stage::Pretrain).unwrap();
    assert_eq!(a.ran, vec![Stage::Prepare, Stage::Pretrain]);
    assert!(!tmp.path().join(METRICS).exists());
    let b = run_pipeline(&cfg).unwrap();
    assert_eq!(b.skipped, vec![Stage::Prepare, Stage::Pretrain]);
}

#[test]
fn stage_errors_name_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    cfg.set("input", tmp.path().join("absent.tsv").to_str().unwrap()).unwrap();
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(err.to_string().contains("prepare"), "{err}");

    let mut cfg = tiny(&tmp.path().join("b"));
    cfg.apply_overrides(&["target=custom", "target_group=0.5,0.5"]).unwrap();
    match run_pipeline(&cfg) {
        Err(err) => assert!(err.to_string().contains("adapt"), "{err}"),
        Ok(_) => panic!("two group targets for three groups should fail"),
    }
}

fn values(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn summary_rows(dir: &Path) -> Vec<String> {
    let text = fs::read_to_string(dir.join("summary.csv")).unwrap();
    text.lines().skip(1).map(str::to_string).collect()
}

#[test]
fn lambda_sweep_has_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(&tmp.path().join("unused"));
    let vals = values(&["1e-6", "1e-4", "1e-2", "1e-1", "0.5", "1"]);
    let rows = sweep(&cfg, SweepAxis::LambdaAcc, &vals, tmp.path()).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.outcome.is_ok()));
    assert_eq!(summary_rows(tmp.path()).len(), 6);
}

#[test]
fn ratio_sweep_covers_the_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(&tmp.path().join("unused"));
    let vals = values(&["5:1", "3:1", "1:1", "1:3", "1:5", "0:1"]);
    let rows = sweep(&cfg, SweepAxis::InterIntraRatio, &vals, tmp.path()).unwrap();
    assert_eq!(rows.len(), 6);
    for (r, v) in rows.iter().zip(&vals) {
        assert_eq!(&r.value, v);
        assert!(r.outcome.is_ok(), "{v}: {:?}", r.outcome);
    }
    assert_eq!(summary_rows(tmp.path()).len(), 6);
}

#[test]
fn hidden_sweep_records_failures_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(&tmp.path().join("unused"));
    let vals = values(&["16", "0", "32", "64"]);
    let rows = sweep(&cfg, SweepAxis::HiddenDim, &vals, tmp.path()).unwrap();
    let ok: Vec<_> = rows.iter().filter(|r| r.outcome.is_ok()).map(|r| r.value.as_str()).collect();
    assert_eq!(ok, ["16", "32", "64"]);
    let lines = summary_rows(tmp.path());
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0,failed,"), "{}", lines[1]);
}
