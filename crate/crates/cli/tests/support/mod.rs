#![allow(dead_code)]

use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn echoatt(args: &[&str]) -> Output {
    echoatt_env(args, &[])
}

pub fn echoatt_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_echoatt"));
    cmd.args(args).env_remove("ECHOATT_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn echoatt")
}

/// Runs a command that must succeed and returns its stdout.
pub fn ok(args: &[&str]) -> String {
    let out = echoatt(args);
    assert!(
        out.status.success(),
        "echoatt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn schema(name: &str) -> jsonschema::Validator {
    let path = repo_root().join("schemas").join(name);
    let raw: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    jsonschema::validator_for(&raw).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn assert_valid(schema_name: &str, doc: &Value) {
    let v = schema(schema_name);
    let errors: Vec<String> = v
        .iter_errors(doc)
        .map(|e| format!("{} at {}", e, e.instance_path()))
        .collect();
    assert!(errors.is_empty(), "{schema_name}: {errors:#?}");
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// A four-layer model on a 30 kB slice of the toy corpus; every command
/// finishes in a second or two.
pub fn tiny_workspace(dir: &Path) -> PathBuf {
    let corpus = std::fs::read(repo_root().join("data/toy_corpus.txt")).unwrap();
    std::fs::write(dir.join("corpus.txt"), &corpus[..30_000]).unwrap();
    let cfg = serde_json::json!({
        "seed": 3,
        "model": {"n_layers": 4, "d_model": 16, "n_heads": 2, "n_kv_heads": 1, "d_ff": 24,
                  "vocab_size": 257, "max_seq_len": 32},
        "data": {"paths": ["corpus.txt"], "val_fraction": 0.2, "batch": {"seq_len": 32, "batch_size": 4}},
        "teacher": {"epochs": 0.5, "optimizer": {"lr": 0.003}},
        "analysis": {"samples": 4, "seq_len": 32},
        "distill": {"stage1_epochs": 0.2, "stage2_epochs": 0.1},
        "optimizer": {"lr": 0.001},
        "bench": {"seq_len": 32, "batch": 1, "repeats": 5},
        "out_dir": "out"
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
