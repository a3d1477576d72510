use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn heta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heta"))
        .args(args)
        .env_remove("HETA_RUN_DIR")
        .output()
        .expect("run heta")
}

fn checkpoint() -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets/planted.ckpt");
    p.to_str().unwrap().to_string()
}

fn error_of(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not JSON: {}", text))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small corpus written with the default vocabulary.
fn corpus(dir: &Path) -> PathBuf {
    let run = dir.join("corpus");
    let out = heta(&["--run-dir", s(&run), "gen-corpus", "--count", "6"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    run.join("corpus.jsonl")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert!(heta(&["--help"]).status.success());
    assert!(heta(&["--version"]).status.success());
    assert!(heta(&["attribute", "--help"]).status.success());
}

#[test]
fn usage_errors_exit_two_with_json() {
    let out = heta(&["attribute", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_of(&out)["error"]["kind"], "usage");

    let dir = tempfile::tempdir().unwrap();
    let out = heta(&["--run-dir", s(dir.path()), "attribute", "--beta", "-1", "--checkpoint", &checkpoint()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_of(&out)["error"]["exit_code"], 2);

    let out = heta(&["--run-dir", s(dir.path()), "attribute", "--methods", "nonsense", "--checkpoint", &checkpoint()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.ckpt");
    let out = heta(&["--run-dir", s(&dir.path().join("r")), "attribute", "--checkpoint", s(&missing), "--corpus", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_of(&out);
    assert_eq!(e["error"]["kind"], "io");
    assert!(e["error"]["message"].as_str().unwrap().contains("absent.ckpt"));
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("other");
    let out = heta(&["--run-dir", s(&run), "gen-corpus", "--count", "3", "--num-values", "9"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = heta(&[
        "--run-dir",
        s(&dir.path().join("r")),
        "attribute",
        "--checkpoint",
        &checkpoint(),
        "--corpus",
        s(&run.join("corpus.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out)["error"]["kind"], "vocab-mismatch");
}

#[test]
fn attribute_full_and_lrwin_writes_reports_and_delta() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let run = dir.path().join("attr");
    let out = heta(&[
        "--run-dir",
        s(&run),
        "attribute",
        "--checkpoint",
        &checkpoint(),
        "--corpus",
        s(&corpus),
        "--limit",
        "2",
        "--variants",
        "full,lr+win",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let listing: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(listing["run_dir"], s(&run));
    for f in ["report.heta-full.jsonl", "report.heta-lrwin.jsonl", "delta.jsonl", "heatmap.html", "timings.json"] {
        assert!(run.join(f).exists(), "missing {}", f);
    }
    let full = std::fs::read_to_string(run.join("report.heta-full.jsonl")).unwrap();
    let rows: Vec<Value> = full.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["variant"], "full");
    assert!(rows[0].get("timings").is_none());
    let delta = std::fs::read_to_string(run.join("delta.jsonl")).unwrap();
    assert_eq!(delta.lines().count(), 2);
}

#[test]
fn attribute_accepts_raw_text() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("text");
    let out = heta(&[
        "--run-dir",
        s(&run),
        "attribute",
        "--checkpoint",
        &checkpoint(),
        "--text",
        "f1 f2 <s> KEY v3 f4 <s> Q v3",
        "--methods",
        "heta,grad",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("report.grad.jsonl").exists());
}

#[test]
fn config_echo_reproduces_the_run_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let first = dir.path().join("first");
    let args = |run: &Path| {
        vec![
            "--run-dir".to_string(),
            s(run).to_string(),
            "attribute".into(),
            "--checkpoint".into(),
            checkpoint(),
            "--corpus".into(),
            s(&corpus).to_string(),
            "--limit".into(),
            "1".into(),
            "--beta".into(),
            "0.3".into(),
        ]
    };
    let a = args(&first);
    let out = heta(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let second = dir.path().join("second");
    let echo = first.join("config.json");
    let out = heta(&["--run-dir", s(&second), "--config", s(&echo), "attribute"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(first.join("report.heta-full.jsonl")).unwrap(),
        std::fs::read(second.join("report.heta-full.jsonl")).unwrap()
    );
    assert_eq!(read_json(&echo), read_json(&second.join("config.json")));

    let third = dir.path().join("third");
    let out = heta(&["--run-dir", s(&third), "--config", s(&echo), "attribute", "--beta", "0.7"]);
    assert!(out.status.success());
    let cfg = read_json(&third.join("config.json"));
    assert_eq!(cfg["heta"]["beta"], 0.7);
    assert_eq!(cfg["args"]["input"]["limit"], 1);

    let out = heta(&["--run-dir", s(&third), "--config", s(&echo), "ablate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_lists_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let run = dir.path().join("ablate");
    let out = heta(&[
        "--run-dir",
        s(&run),
        "ablate",
        "--checkpoint",
        &checkpoint(),
        "--corpus",
        s(&corpus),
        "--limit",
        "2",
        "--resamples",
        "50",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = read_json(&run.join("ablation.json"));
    let names: Vec<&str> = table.as_array().unwrap().iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(
        names,
        ["full", "transition-only", "hessian-only", "kl-only", "no-gate", "uniform-gate", "lr", "ls", "win", "lr+win", "gs"]
    );
    let md = std::fs::read_to_string(run.join("ablation.md")).unwrap();
    assert_eq!(md.lines().count(), 13);
}

#[test]
fn check_theory_on_shipped_checkpoint_passes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let run = dir.path().join("theory");
    let out = heta(&[
        "--run-dir",
        s(&run),
        "check-theory",
        "--checkpoint",
        &checkpoint(),
        "--corpus",
        s(&corpus),
        "--limit",
        "3",
        "--oracle-instances",
        "2",
        "--lrwin-instances",
        "1",
        "--taylor-instances",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let t = read_json(&run.join("theory.json"));
    assert_eq!(t["violations"], 0);
    assert!(t["checks"].as_u64().unwrap() > 100);
    assert!(run.join("bounds.md").exists());
}

#[test]
fn evaluate_writes_summary_and_eval_rows() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let run = dir.path().join("eval");
    let out = heta(&[
        "--run-dir",
        s(&run),
        "evaluate",
        "--checkpoint",
        &checkpoint(),
        "--corpus",
        s(&corpus),
        "--limit",
        "3",
        "--methods",
        "heta,grad",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read_json(&run.join("summary.json"));
    assert_eq!(summary["instances"], 3);
    assert!(summary["methods"]["heta/full"]["dsa"]["mean"].as_f64().unwrap() > 0.5);
    let rows = std::fs::read_to_string(run.join("eval.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 6);
}

#[test]
fn default_training_rebuilds_the_shipped_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("train");
    let out = heta(&["--run-dir", s(&run), "train"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(run.join("model.ckpt")).unwrap(), std::fs::read(checkpoint()).unwrap());
    let report = read_json(&run.join("train_report.json"));
    assert!(report["holdout_accuracy"].as_f64().unwrap() >= 0.9);
}
