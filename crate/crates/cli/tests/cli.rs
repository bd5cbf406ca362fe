//! Drives the binary: exit codes, error messages and the train/eval cycle.

use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"schema = 1
seed = 3

[dataset]
source = "mixture"
classes = 4
per_class = 60
test_per_class = 30
dim = 5
radius = 4.0
sigma = 0.5

[model]
hidden = [16]
embedding_dim = 2
activation = "relu"

[loss]
kind = "softmax"

[train]
epochs = 5
batch_size = 32
learning_rate = 0.01
momentum = 0.9

[eval]
far_targets = [0.1]
gallery_per_class = 3
unknown_classes = 1
out_dir = "run"
"#;

fn irsoftmax(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_irsoftmax"));
    cmd.current_dir(dir).args(args).env_clear();
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn with_config(text: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), text).unwrap();
    dir
}

#[test]
fn train_then_eval() {
    let dir = with_config(CONFIG);
    let out = irsoftmax(dir.path(), &["train", "--config", "exp.toml", "--quiet"], &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    let run = dir.path().join("run");
    for name in ["config.toml", "checkpoint.json", "embeddings.csv", "eval_report.json", "run_log.jsonl"] {
        assert!(run.join(name).is_file(), "{name}");
    }
    let report = std::fs::read(run.join("eval_report.json")).unwrap();
    let out = irsoftmax(dir.path(), &["eval", "--config", "exp.toml"], &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("VR@FAR"));
    assert_eq!(std::fs::read(run.join("eval_report.json")).unwrap(), report);
}

#[test]
fn eval_refuses_checkpoint_from_other_training_config() {
    let dir = with_config(CONFIG);
    let out = irsoftmax(dir.path(), &["train", "--config", "exp.toml", "--quiet"], &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = irsoftmax(dir.path(), &["eval", "--config", "exp.toml", "--seed", "4"], &[]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn zero_batch_size_is_a_config_error() {
    let dir = with_config(&CONFIG.replace("batch_size = 32", "batch_size = 0"));
    let out = irsoftmax(dir.path(), &["train", "--config", "exp.toml"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("train.batch_size"), "{}", stderr(&out));
}

#[test]
fn env_override_is_validated_too() {
    let dir = with_config(CONFIG);
    let out = irsoftmax(dir.path(), &["train", "--config", "exp.toml"], &[("IRS__TRAIN__BATCH_SIZE", "0")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("train.batch_size"), "{}", stderr(&out));
}

#[test]
fn syntax_error_names_the_line() {
    let dir = with_config(&CONFIG.replace("momentum = 0.9", "momentum = = 0.9"));
    let out = irsoftmax(dir.path(), &["train", "--config", "exp.toml"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let line = CONFIG.lines().position(|l| l.starts_with("momentum")).unwrap() + 1;
    assert!(stderr(&out).contains(&format!("line {line}")), "{}", stderr(&out));
}

#[test]
fn unknown_key_is_rejected() {
    let dir = with_config(&CONFIG.replace("momentum = 0.9", "momentum = 0.9\nmomentun = 0.8"));
    let out = irsoftmax(dir.path(), &["train", "--config", "exp.toml"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("momentun"), "{}", stderr(&out));
}

#[test]
fn divergence_exits_3_with_position() {
    let dir = with_config(&CONFIG.replace("learning_rate = 0.01", "learning_rate = 1e300"));
    let out = irsoftmax(dir.path(), &["train", "--config", "exp.toml", "--quiet"], &[]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr(&out);
    assert!(err.contains("epoch 0") && err.contains("batch"), "{err}");
}

#[test]
fn missing_config_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = irsoftmax(dir.path(), &["train", "--config", "nope.toml"], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nope.toml"));
}

#[test]
fn gradcheck_filter_and_failure_injection() {
    let dir = tempfile::tempdir().unwrap();
    let out = irsoftmax(dir.path(), &["gradcheck", "--losses", "margin", "--points", "10"], &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), 4, "{text}");
    assert!(text.lines().all(|l| l.starts_with("margin_") && l.ends_with("ok")));

    let out = irsoftmax(dir.path(), &["gradcheck", "--losses", "npairs", "--perturb", "0.01"], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
