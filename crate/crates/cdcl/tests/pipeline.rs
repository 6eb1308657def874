//! End-to-end checks of the command-line binary: artifact layout, exit
//! codes, determinism of written reports, and the source-free guarantee
//! that no source file is ever needed or allowed.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cdcl")
}

/// Small benchmark so each pipeline run stays fast; geometry matches the
/// defaults, only the budgets shrink.
const FAST: &[&str] = &[
    "--set", "per_class_count=40",
    "--set", "pretrain_epochs=8",
    "--set", "epochs=5",
    "--set", "iters_per_epoch=8",
];

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary should run")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Workspace { _dir: dir, root }
    }

    fn dir(&self, name: &str) -> PathBuf {
        let p = self.root.join(name);
        std::fs::create_dir_all(&p).unwrap();
        p
    }

    fn path(&self, rel: &str) -> String {
        self.root.join(rel).to_string_lossy().into_owned()
    }
}

fn generate(ws: &Workspace, seed: &str) {
    let data = ws.dir("data");
    let mut args = vec!["gen-data", "--out", data.to_str().unwrap(), "--seed", seed];
    args.extend_from_slice(FAST);
    assert_ok(&run(&args), "gen-data");
    for f in ["source.ds", "target.ds", "target.labels", "config.resolved"] {
        assert!(data.join(f).is_file(), "gen-data should write {f}");
    }
}

fn pretrain(ws: &Workspace, seed: &str) {
    let out = ws.dir("pre");
    let source = ws.path("data/source.ds");
    let mut args = vec!["pretrain", "--source", &source, "--out", out.to_str().unwrap(), "--seed", seed];
    args.extend_from_slice(FAST);
    assert_ok(&run(&args), "pretrain");
    for f in ["source_model.ckpt", "pretrain_report.json", "config.resolved"] {
        assert!(out.join(f).is_file(), "pretrain should write {f}");
    }
}

fn adapt(ws: &Workspace, seed: &str, mode: &str, out_name: &str, with_source: bool) -> Output {
    let out = ws.dir(out_name);
    let ckpt = ws.path("pre/source_model.ckpt");
    let source = ws.path("data/source.ds");
    let target = ws.path("data/target.ds");
    let labels = ws.path("data/target.labels");
    let mut args = vec![
        "adapt", "--mode", mode, "--ckpt", &ckpt, "--target", &target,
        "--target-labels", &labels, "--out", out.to_str().unwrap(), "--seed", seed,
    ];
    if with_source {
        args.extend_from_slice(&["--source", &source]);
    }
    args.extend_from_slice(FAST);
    run(&args)
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn standard_pipeline_artifacts_and_eval_agreement() {
    let ws = Workspace::new();
    generate(&ws, "3");
    pretrain(&ws, "3");
    let out = adapt(&ws, "3", "standard", "adapt", true);
    assert_ok(&out, "adapt");
    let dir = ws.root.join("adapt");
    for f in ["adapted_model.ckpt", "train_report.json", "embeddings.tsv", "config.resolved"] {
        assert!(dir.join(f).is_file(), "adapt should write {f}");
    }
    let report = read_json(&dir.join("train_report.json"));
    assert_eq!(report["mode"], "standard");
    let reported = report["target_accuracy"].as_f64().unwrap();

    // eval on the adapted checkpoint must reproduce the reported accuracy
    let ckpt = ws.path("adapt/adapted_model.ckpt");
    let target = ws.path("data/target.ds");
    let labels = ws.path("data/target.labels");
    let out = run(&["eval", "--ckpt", &ckpt, "--data", &target, "--labels", &labels]);
    assert_ok(&out, "eval");
    let eval: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    let evaluated = eval["accuracy"].as_f64().unwrap();
    assert!(
        (reported - evaluated).abs() < 1e-12,
        "report says {reported}, eval says {evaluated}"
    );

    // resolved config records what ran
    let resolved = std::fs::read_to_string(dir.join("config.resolved")).unwrap();
    assert!(resolved.contains("adapt_mode=standard"));
    assert!(resolved.contains("lambda=1.6"));
    assert!(resolved.contains("seed=3"));
}

#[test]
fn identical_seeds_write_identical_artifacts() {
    let ws = Workspace::new();
    generate(&ws, "4");
    pretrain(&ws, "4");
    assert_ok(&adapt(&ws, "4", "standard", "a1", true), "first adapt");
    assert_ok(&adapt(&ws, "4", "standard", "a2", true), "second adapt");
    for f in ["train_report.json", "adapted_model.ckpt", "embeddings.tsv", "config.resolved"] {
        let a = std::fs::read(ws.root.join("a1").join(f)).unwrap();
        let b = std::fs::read(ws.root.join("a2").join(f)).unwrap();
        assert!(a == b, "{f} differs between identical runs");
    }
}

#[test]
fn source_free_runs_with_source_file_deleted() {
    let ws = Workspace::new();
    generate(&ws, "5");
    pretrain(&ws, "5");
    std::fs::remove_file(ws.root.join("data/source.ds")).unwrap();
    let out = adapt(&ws, "5", "source-free", "sdf", false);
    assert_ok(&out, "source-free adapt");
    let report = read_json(&ws.root.join("sdf/train_report.json"));
    assert_eq!(report["mode"], "source-free");
    assert!(report["target_accuracy"].as_f64().is_some());
}

#[test]
fn source_free_rejects_source_data() {
    let ws = Workspace::new();
    generate(&ws, "6");
    pretrain(&ws, "6");
    let out = adapt(&ws, "6", "source-free", "sdf", true);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("source data forbidden in source-free mode"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn standard_requires_source() {
    let ws = Workspace::new();
    generate(&ws, "7");
    pretrain(&ws, "7");
    let out = adapt(&ws, "7", "standard", "a", false);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("requires --source"), "stderr: {}", stderr(&out));
}

#[test]
fn ablation_mode_overrides_pair_formation() {
    let ws = Workspace::new();
    generate(&ws, "8");
    pretrain(&ws, "8");
    let out = adapt(&ws, "8", "ablation:cross-source-anchors", "abl", true);
    assert_ok(&out, "ablation adapt");
    let resolved = std::fs::read_to_string(ws.root.join("abl/config.resolved")).unwrap();
    assert!(resolved.contains("adapt_mode=ablation:cross-source-anchors"));
    assert!(resolved.contains("pair_mode=cross-source-anchors"));
    let report = read_json(&ws.root.join("abl/train_report.json"));
    assert_eq!(report["config"]["pair_mode"], "cross-source-anchors");

    let bad = adapt(&ws, "8", "ablation:sideways", "abl2", true);
    assert_eq!(code(&bad), 2);
}

#[test]
fn eval_requires_labels_for_unlabeled_data() {
    let ws = Workspace::new();
    generate(&ws, "9");
    pretrain(&ws, "9");
    let ckpt = ws.path("pre/source_model.ckpt");
    let target = ws.path("data/target.ds");
    let out = run(&["eval", "--ckpt", &ckpt, "--data", &target]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--labels"), "stderr: {}", stderr(&out));
}

#[test]
fn missing_output_directory_is_an_io_error() {
    let ws = Workspace::new();
    let missing = ws.path("does/not/exist");
    let out = run(&["gen-data", "--out", &missing]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("does/not/exist"), "stderr: {}", stderr(&out));
}

#[test]
fn unknown_config_key_is_rejected() {
    let ws = Workspace::new();
    let data = ws.dir("data");
    let out = run(&["gen-data", "--out", data.to_str().unwrap(), "--set", "warp_factor=9"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("warp_factor"), "stderr: {}", stderr(&out));
}

#[test]
fn corrupt_dataset_reports_line_number() {
    let ws = Workspace::new();
    generate(&ws, "10");
    let path = ws.root.join("data/source.ds");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[1] = lines[1].replacen(char::is_numeric, "banana", 1);
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let pre = ws.dir("pre");
    let source = ws.path("data/source.ds");
    let mut args = vec!["pretrain", "--source", &source, "--out", pre.to_str().unwrap()];
    args.extend_from_slice(FAST);
    let out = run(&args);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains(":2:"), "stderr: {}", stderr(&out));
}

#[test]
fn diverging_run_exits_with_numeric_code() {
    let ws = Workspace::new();
    generate(&ws, "11");
    let pre = ws.dir("pre");
    let source = ws.path("data/source.ds");
    let mut args = vec![
        "pretrain", "--source", &source, "--out", pre.to_str().unwrap(),
        "--set", "lr_backbone=1e18", "--set", "lr_new_layers=1e18",
    ];
    args.extend_from_slice(FAST);
    let out = run(&args);
    assert_eq!(code(&out), 4, "stderr: {}", stderr(&out));
}

#[test]
fn export_embeddings_without_source_uses_frozen_prototypes() {
    let ws = Workspace::new();
    generate(&ws, "12");
    pretrain(&ws, "12");
    std::fs::remove_file(ws.root.join("data/source.ds")).unwrap();
    let out_dir = ws.dir("exp");
    let ckpt = ws.path("pre/source_model.ckpt");
    let target = ws.path("data/target.ds");
    let labels = ws.path("data/target.labels");
    let out = run(&[
        "export-embeddings", "--ckpt", &ckpt, "--target", &target,
        "--target-labels", &labels, "--out", out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out, "export-embeddings");
    let tsv = std::fs::read_to_string(out_dir.join("embeddings.tsv")).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert!(lines[0].starts_with("id\tdomain\tlabel\tpseudo_label\tconfidence\tz_1"));
    assert_eq!(lines.len(), 121, "header plus one row per target sample");
    assert!(lines[1..].iter().all(|l| l.split('\t').nth(1) == Some("target")));
}

#[test]
fn config_file_applies_between_defaults_and_flags() {
    let ws = Workspace::new();
    let cfg_path = ws.root.join("run.json");
    std::fs::write(&cfg_path, r#"{"classes": 4, "seed": 99}"#).unwrap();
    let data = ws.dir("data");
    let out = run(&[
        "gen-data", "--out", data.to_str().unwrap(),
        "--config", cfg_path.to_str().unwrap(), "--seed", "7",
    ]);
    assert_ok(&out, "gen-data with config file");
    let resolved = std::fs::read_to_string(data.join("config.resolved")).unwrap();
    assert!(resolved.contains("classes=4"), "file override should hold");
    assert!(resolved.contains("seed=7"), "flag should beat file");
}
