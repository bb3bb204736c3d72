use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ciga::harness::{RunReport, RunResult, RunStatus, Scores};
use ciga::model::Checkpoint;

fn ciga(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ciga"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ciga(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CONFIG: &str = r#"{
  "objective": "ciga_v2",
  "loss": {"alpha": 1.0, "beta": 0.5},
  "batch_size": 8,
  "max_epochs": 4,
  "pretrain_epochs": 2,
  "patience": 1,
  "hidden": 8,
  "seed": 3
}"#;

/// gen -> train -> eval at two biases, then report and plot. Returns every
/// produced file keyed by its path relative to `root`.
fn pipeline(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let config = root.join("run.json");
    fs::write(&config, CONFIG).unwrap();
    for bias in ["0.5", "0.9"] {
        let data = root.join(format!("data_{bias}.jsonl"));
        ok(&[
            "gen", "--mode", "mixed_fiif", "--bias", bias, "--train-per-class", "10",
            "--val-per-class", "5", "--test-per-class", "5", "--base-min", "4", "--base-max", "8",
            "--seed", "7", "--out", s(&data),
        ]);
        let run = root.join("runs").join(bias);
        ok(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run)]);
        let scores = ok(&["eval", "--ckpt", s(&run.join("checkpoint.json")), "--data", s(&data)]);
        let scores: Scores = serde_json::from_str(&scores).unwrap();
        let record: RunResult = serde_json::from_str(&fs::read_to_string(run.join("record.json")).unwrap()).unwrap();
        assert_eq!(record.status, RunStatus::Completed);
        assert_eq!(record.metrics.unwrap().test, scores);
    }
    ok(&["report", "--runs", s(&root.join("runs")), "--out", s(&root.join("report"))]);
    ok(&[
        "plot", "--reports", s(&root.join("report.json")), "--metric", "test_acc", "--out",
        s(&root.join("acc.svg")),
    ]);
    let mut files = Vec::new();
    collect(root, root, &mut files);
    files.sort();
    files
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            collect(root, &p, out);
        } else {
            out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
        }
    }
}

#[test]
fn sixty_graph_round_trip_produces_valid_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let files = pipeline(dir.path());
    let names: Vec<String> = files.iter().map(|(p, _)| p.display().to_string()).collect();
    for want in ["report.json", "report.csv", "acc.svg", "runs/0.9/log.csv", "runs/0.5/checkpoint.json"] {
        assert!(names.iter().any(|n| n == want), "missing {want} in {names:?}");
    }
    let data = fs::read_to_string(dir.path().join("data_0.5.jsonl")).unwrap();
    assert_eq!(data.lines().count(), 1 + 60);

    let report = RunReport::load(dir.path().join("report.json")).unwrap();
    assert_eq!(report.records.len(), 2);
    assert_eq!(report.configs.len(), 2);
    assert!(report.aggregates.iter().all(|a| a.single_seed && a.std == 0.0));
    Checkpoint::load(dir.path().join("runs/0.5/checkpoint.json")).unwrap();
    let log = fs::read_to_string(dir.path().join("runs/0.5/log.csv")).unwrap();
    assert!(log.starts_with("epoch,"));
    let svg = fs::read_to_string(dir.path().join("acc.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let fa = pipeline(a.path());
    let fb = pipeline(b.path());
    assert_eq!(fa.len(), fb.len());
    for ((pa, ba), (pb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(pa, pb);
        assert!(ba == bb, "{} differs between reruns", pa.display());
    }
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("d.jsonl");
    ok(&[
        "gen", "--mode", "struc", "--bias", "0.6", "--train-per-class", "4", "--val-per-class", "2",
        "--test-per-class", "2", "--base-min", "4", "--base-max", "6", "--out", s(&data),
    ]);
    let code = |args: &[&str]| ciga(args).status.code();

    let bad = root.join("bad.json");
    fs::write(&bad, r#"{"objective": "erm", "learning_rat": 0.1}"#).unwrap();
    assert_eq!(code(&["train", "--config", s(&bad), "--data", s(&data), "--out", s(&root.join("r1"))]), Some(2));
    fs::write(&bad, r#"{"learning_rate": -1.0}"#).unwrap();
    assert_eq!(code(&["train", "--config", s(&bad), "--data", s(&data), "--out", s(&root.join("r1"))]), Some(2));
    assert_eq!(
        code(&["gen", "--mode", "struc", "--bias", "0.1", "--out", s(&root.join("x.jsonl"))]),
        Some(2)
    );

    let good = root.join("good.json");
    fs::write(&good, r#"{"max_epochs": 3, "pretrain_epochs": 1, "batch_size": 4}"#).unwrap();
    let broken = root.join("broken.jsonl");
    fs::write(&broken, "{\"format\":\"ciga-ds\"\n").unwrap();
    assert_eq!(code(&["train", "--config", s(&good), "--data", s(&broken), "--out", s(&root.join("r2"))]), Some(3));
    assert_eq!(
        code(&["train", "--config", s(&good), "--data", s(&root.join("missing.jsonl")), "--out", s(&root.join("r2"))]),
        Some(3)
    );

    let wild = root.join("wild.json");
    fs::write(&wild, r#"{"learning_rate": 1e300, "max_epochs": 3, "pretrain_epochs": 1, "batch_size": 4}"#).unwrap();
    let run = root.join("r3");
    assert_eq!(code(&["train", "--config", s(&wild), "--data", s(&data), "--out", s(&run)]), Some(4));
    let record: RunResult = serde_json::from_str(&fs::read_to_string(run.join("record.json")).unwrap()).unwrap();
    assert!(matches!(record.status, RunStatus::Diverged { .. }));
}
