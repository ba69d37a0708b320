use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fairadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairadapt")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn error_kind(o: &Output) -> String {
    let line = String::from_utf8_lossy(&o.stderr);
    let v: serde_json::Value = serde_json::from_str(line.trim()).expect("stderr is one JSON object");
    v["error"]["kind"].as_str().unwrap().to_string()
}

const TINY: &[&str] = &[
    "--set", "synthetic_users=40",
    "--set", "synthetic_items=60",
    "--set", "synthetic_providers=6",
    "--set", "synthetic_per_user=15",
    "--set", "pretrain_epochs=5",
    "--set", "epochs=2",
    "--set", "batch_size=20",
    "--set", "candidates=30",
];

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn grad_check_passes_and_prints_a_table() {
    let o = fairadapt(&["grad-check", "--points", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.lines().count() >= 8, "{text}");
}

#[test]
fn run_accepts_grad_check_stage() {
    let o = fairadapt(&["run", "--stage", "grad-check"]);
    assert!(o.status.success());
}

#[test]
fn unknown_key_is_an_invalid_argument() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fairadapt(&["run", "--set", "no_such_key=1", "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_kind(&o), "invalid_argument");
}

#[test]
fn bad_flags_are_usage_errors() {
    let o = fairadapt(&["adapt", "--nope"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_kind(&o), "usage");
}

#[test]
fn config_file_and_overrides_combine() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.cfg");
    fs::write(&cfg, "# tiny run\nsynthetic_users = 40\nepochs = 1\n").unwrap();
    let out = tmp.path().join("run");
    let mut args = vec!["run", "--config", p(&cfg), "--stage", "prepare", "--out", p(&out)];
    args.extend_from_slice(&["--set", "synthetic_items=60"]);
    let o = fairadapt(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(resolved.contains("synthetic_users = 40"), "{resolved}");
    assert!(resolved.contains("synthetic_items = 60"), "{resolved}");
    assert!(resolved.contains("epochs = 1"), "{resolved}");
}

#[test]
fn stage_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let (bundle, backbone, adapter, eval, report) = (
        d.join("bundle.json"),
        d.join("bb/backbone.bin"),
        d.join("ad/adapter.bin"),
        d.join("eval"),
        d.join("subgroups.csv"),
    );
    let ok = |args: Vec<&str>| {
        let o = fairadapt(&args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    ok(vec![
        "prepare", "--synthetic", "users=40", "--synthetic", "items=60", "--synthetic", "providers=6",
        "--synthetic", "per_user=15", "--out", p(&bundle),
    ]);
    ok(vec!["pretrain", "--data", p(&bundle), "--epochs", "5", "--out", p(&backbone)]);
    assert!(d.join("bb/pretrain_log.csv").exists());
    ok(vec![
        "adapt", "--data", p(&bundle), "--backbone", p(&backbone), "--epochs", "2", "--batch-size", "20",
        "--out", p(&adapter),
    ]);
    let log = fs::read_to_string(d.join("ad/train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,l_fair,l_diffndcg,l_total,val_ndcg,val_gini");
    assert_eq!(log.lines().count(), 4);
    ok(vec![
        "evaluate", "--data", p(&bundle), "--backbone", p(&backbone), "--adapter", p(&adapter), "--out", p(&eval),
    ]);
    assert!(eval.join("exposure.csv").exists());
    let text = ok(vec![
        "report", "--data", p(&bundle), "--metrics", p(&eval.join("metrics.json")), "--out", p(&report),
    ]);
    for g in ["head", "mid", "tail"] {
        assert!(text.contains(g), "{text}");
    }
    let csv = fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "group,share,within_gini");
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn adapt_rejects_foreign_backbone() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let (a, b, bb) = (d.join("a.json"), d.join("b.json"), d.join("bb.bin"));
    for (path, users) in [(&a, "users=40"), (&b, "users=50")] {
        let o = fairadapt(&["prepare", "--synthetic", users, "--synthetic", "items=60", "--out", p(path)]);
        assert!(o.status.success());
    }
    assert!(fairadapt(&["pretrain", "--data", p(&a), "--epochs", "1", "--out", p(&bb)]).status.success());
    let o = fairadapt(&["adapt", "--data", p(&b), "--backbone", p(&bb), "--out", p(&d.join("x.bin"))]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_kind(&o), "shape");
}

#[test]
fn run_reports_skipped_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let mut args = vec!["run", "--out", p(&out)];
    args.extend_from_slice(TINY);
    let first = stdout(&fairadapt(&args));
    assert!(first.lines().take(5).all(|l| l.ends_with(" ran")), "{first}");
    let second = stdout(&fairadapt(&args));
    assert!(second.lines().take(5).all(|l| l.ends_with("up to date")), "{second}");

    args.extend_from_slice(&["--set", "lambda_acc=0.3"]);
    let third = stdout(&fairadapt(&args));
    let states: Vec<_> = third.lines().take(5).map(|l| l.ends_with(" ran")).collect();
    assert_eq!(states, [false, false, true, true, true], "{third}");
}

#[test]
fn sweep_exits_nonzero_when_a_value_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep", "--axis", "hidden_dim", "--values", "8,0", "--out", p(tmp.path())];
    args.extend_from_slice(TINY);
    let o = fairadapt(&args);
    assert_eq!(o.status.code(), Some(1));
    let summary = fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}
