use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cogshift::corpus::load_corpus;
use serde_json::Value;

fn cogshift(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cogshift"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn cogshift")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("one-line JSON summary")
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("error line");
    serde_json::from_str(line).expect("JSON error line")
}

#[test]
fn synth_then_ingest_produces_a_loadable_split_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let s = stdout_json(&cogshift(dir.path(), &["synth", "--n", "20", "--seed", "2", "--out", "raw.jsonl"]));
    assert_eq!(s["status"], "ok");
    assert_eq!(s["records"], 20);
    let s = stdout_json(&cogshift(
        dir.path(),
        &["ingest", "--input", "raw.jsonl", "--train-fraction", "0.75", "--seed", "2", "--out", "corpus.jsonl", "--stats", "stats.json"],
    ));
    assert_eq!(s["status"], "ok");
    let corpus = load_corpus(&dir.path().join("corpus.jsonl")).unwrap();
    assert_eq!(corpus.len(), 20);
    assert_eq!(corpus.train().len(), 15);
    assert_eq!(corpus.test().len(), 5);
    let stats: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("stats.json")).unwrap()).unwrap();
    assert!(stats.is_object());
}

#[test]
fn missing_artifact_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = cogshift(dir.path(), &["index", "--corpus", "absent.jsonl", "--out", "index"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["status"], "error");
    assert_eq!(err["kind"], "missing_artifact");
    assert!(err["path"].as_str().unwrap().ends_with("absent.jsonl"));
}

#[test]
fn bad_flag_value_is_a_usage_error_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = cogshift(dir.path(), &["infer", "--mode", "sideways"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["kind"], "usage");
}

#[test]
fn missing_required_path_is_an_argument_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cogshift(dir.path(), &["index"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["kind"], "argument");
}

#[test]
fn config_errors_name_the_offending_field() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[train]\nepoch = 3\n").unwrap();
    let out = cogshift(dir.path(), &["--config", "bad.toml", "synth", "--out", "raw.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["kind"], "config");
    assert_eq!(err["field"], "train.epoch");
}

#[test]
fn config_paths_and_sections_are_used_when_flags_are_absent() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p.toml"), "[paths]\ncorpus = \"corpus.jsonl\"\n[synth]\nn = 12\nseed = 4\n").unwrap();
    let s = stdout_json(&cogshift(dir.path(), &["--config", "p.toml", "synth", "--out", "corpus.jsonl"]));
    assert_eq!(s["records"], 12);
    let s = stdout_json(&cogshift(dir.path(), &["--config", "p.toml", "index", "--out", "index"]));
    assert_eq!(s["status"], "ok");
}

#[test]
fn commands_never_overwrite_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    stdout_json(&cogshift(dir.path(), &["synth", "--n", "12", "--out", "raw.jsonl"]));
    let before = fs::read(dir.path().join("raw.jsonl")).unwrap();
    let out = cogshift(dir.path(), &["ingest", "--input", "raw.jsonl", "--train-fraction", "0.5", "--out", "raw.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["kind"], "argument");
    assert_eq!(fs::read(dir.path().join("raw.jsonl")).unwrap(), before);
}

#[test]
fn k_outside_the_grid_needs_an_explicit_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    stdout_json(&cogshift(dir.path(), &["synth", "--n", "20", "--out", "raw.jsonl"]));
    stdout_json(&cogshift(dir.path(), &["ingest", "--input", "raw.jsonl", "--train-fraction", "0.8", "--out", "corpus.jsonl"]));
    let args = ["icl-build", "--corpus", "corpus.jsonl", "--strategy", "image", "--k", "3", "--out", "icl.jsonl"];
    let out = cogshift(dir.path(), &args);
    assert_eq!(stderr_json(&out)["kind"], "argument");
    let s = stdout_json(&cogshift(dir.path(), &[&args[..], &["--any-k"]].concat()));
    assert_eq!(s["k"], 3);
}
