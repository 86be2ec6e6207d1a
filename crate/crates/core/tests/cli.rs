use std::path::Path;
use std::process::{Command, Output};

use lamp::toyworld::Dataset;
use lamp::visualize::check_ppm;

fn lamp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lamp"))
        .args(["--preset", "tiny", "--out"])
        .arg(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lamp(dir, args);
    assert!(out.status.success(), "lamp {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn zero_episodes_give_an_empty_valid_dataset() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["datagen", "--episodes", "0"]);
    let ds = Dataset::load(&dir.path().join("dataset.lampds")).unwrap();
    assert!(ds.is_empty());
}

#[test]
fn bad_invocations_fail() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!lamp(dir.path(), &["datagen", "--no-such-flag"]).status.success());
    assert!(!lamp(dir.path(), &["frobnicate"]).status.success());
    // training without a dataset is a runtime error, exit status 2
    assert_eq!(lamp(dir.path(), &["train-motion"]).status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_lamp")).args(["--preset", "huge", "selftest"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let msg = ok(d, &["datagen"]);
    assert!(msg.contains("sha256"), "{msg}");
    ok(d, &["train-motion"]);
    ok(d, &["train-action", "--mode", "add"]);
    let table = ok(d, &["eval"]);
    assert!(table.lines().any(|l| l.starts_with("add")), "{table}");
    for f in ["stage1_loss.csv", "stage1_manifest.jsonl", "stage2_loss.csv", "eval_report.json", "eval_timing.json"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    let trace = std::fs::read_to_string(d.join("stage1_loss.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 5);

    ok(d, &["visualize", "--instruction", "7", "--scene", "3"]);
    let ppm = std::fs::read(d.join("motion.ppm")).unwrap();
    assert!(check_ppm(&ppm).is_ok());
    let svg = std::fs::read_to_string(d.join("motion.svg")).unwrap();
    assert!(roxmltree::Document::parse(&svg).is_ok());
}

#[test]
fn ablate_reports_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["datagen"]);
    let text = ok(d, &["ablate"]);
    for label in ["gated", "add", "concat_mlp", "none", "gated_2d"] {
        assert!(text.lines().any(|l| l.split_whitespace().next() == Some(label)), "{label} missing:\n{text}");
        assert!(d.join(format!("ablate_{label}.lampck")).exists());
    }
    assert_eq!(text.matches(" -> ").count(), 4, "{text}");
}
