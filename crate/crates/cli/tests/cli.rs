mod support;

use echoatt_cli::RunConfig;
use serde_json::Value;
use std::path::Path;
use support::*;

fn error_of(args: &[&str]) -> (i32, Value) {
    let out = echoatt(args);
    assert!(!out.status.success(), "echoatt {args:?} unexpectedly succeeded");
    let doc: Value = serde_json::from_slice(&out.stderr)
        .unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {}", String::from_utf8_lossy(&out.stderr)));
    assert_valid("error.schema.json", &doc);
    (out.status.code().unwrap(), doc)
}

fn code(doc: &Value) -> &str {
    doc["error"]["code"].as_str().unwrap()
}

#[test]
fn bundled_configs_validate() {
    for name in ["toy.json", "tinyllama.json"] {
        let path = repo_root().join("configs").join(name);
        assert_valid("run-config.schema.json", &read_json(&path));
        RunConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn table3_prints_published_rows_and_flag() {
    let cfg = repo_root().join("configs/tinyllama.json");
    let text = ok(&["table3", s(&cfg)]);
    assert!(text.contains("23.6M") && text.contains("2.14%"), "{text}");
    assert!(text.contains("80.2M") && text.contains("7.29%"), "{text}");
    assert!(text.contains("flag 41%"), "{text}");

    let rows: Value = serde_json::from_str(&ok(&["table3", s(&cfg), "--json"])).unwrap();
    assert_valid("table3.schema.json", &rows);
    assert_eq!(rows.as_array().unwrap().len(), 3);
    assert!(rows[0]["flag"].is_null() && rows[2]["flag"].is_null());
    assert!(rows[1]["flag"].as_str().unwrap().contains("9 layers"));
}

#[test]
fn explicit_indices_plan_gets_published_label() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo_root().join("configs/tinyllama.json");
    let text = ok(&["plan", s(&cfg), "--indices", "2,3,4,5,7", "--out", s(dir.path())]);
    assert!(text.contains("22.7%") && text.contains("paper-23%"), "{text}");
    let plan = read_json(&dir.path().join("plan.json"));
    assert_valid("plan.schema.json", &plan);
    assert_eq!(plan["shared_layers"], serde_json::json!([2, 3, 4, 5, 7]));
    assert_eq!(plan["source_of"][7], 6);
}

#[test]
fn usage_and_config_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (status, doc) = error_of(&["no-such-command"]);
    assert_eq!((status, code(&doc)), (2, "usage"));

    let missing = dir.path().join("absent.json");
    let (status, doc) = error_of(&["table3", s(&missing)]);
    assert_eq!((status, code(&doc)), (4, "missing_file"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"n_layers": 4}}"#).unwrap();
    let (status, doc) = error_of(&["table3", s(&bad)]);
    assert_eq!((status, code(&doc)), (3, "invalid_config"));

    let mut cfg = read_json(&repo_root().join("configs/tinyllama.json"));
    cfg["plan"]["indices"] = serde_json::json!([2, 22]);
    std::fs::write(&bad, cfg.to_string()).unwrap();
    let (status, doc) = error_of(&["table3", s(&bad)]);
    assert_eq!((status, code(&doc)), (3, "invalid_config"));
    assert!(doc["error"]["message"].as_str().unwrap().contains("22"));

    let tiny = tiny_workspace(dir.path());
    let (status, doc) = error_of(&["plan", s(&tiny), "--indices", "0,1"]);
    assert_eq!((status, code(&doc)), (5, "plan_mismatch"));

    let out = echoatt_env(&["table3", s(&tiny)], &[("ECHOATT_SEED", "minus one")]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn end_to_end_outputs_match_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_workspace(dir.path());
    let out = dir.path().join("out");
    let o = |p: &str| out.join(p);
    let cfg = s(&cfg);

    ok(&["train-teacher", cfg]);
    ok(&["analyze", cfg, "--checkpoint", s(&o("teacher.ckpt"))]);
    ok(&["plan", cfg, "--report", s(&o("report.json"))]);
    ok(&[
        "distill",
        cfg,
        "--teacher",
        s(&o("teacher.ckpt")),
        "--plan",
        s(&o("plan.json")),
    ]);
    ok(&["eval", cfg, "--checkpoint", s(&o("student.ckpt"))]);
    let table = ok(&[
        "bench",
        cfg,
        "--baseline",
        s(&o("teacher.ckpt")),
        "--student",
        s(&o("student.ckpt")),
    ]);
    assert!(table.contains("inference tok/s"), "{table}");

    let report = read_json(&o("report.json"));
    assert_valid("report.schema.json", &report);
    assert_valid("plan.schema.json", &read_json(&o("plan.json")));
    assert_valid("eval.schema.json", &read_json(&o("eval.json")));
    assert_valid("bench.schema.json", &read_json(&o("bench.json")));
    for file in ["teacher.ndjson", "train.ndjson"] {
        let text = std::fs::read_to_string(o(file)).unwrap();
        let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert!(lines.len() > 2, "{file}");
        for line in &lines {
            assert_valid("train-line.schema.json", line);
        }
        assert!(lines[0]["command"].is_string());
        assert!(lines.last().unwrap()["final_perplexity"].is_number());
    }

    // CSVs carry the same numbers as the JSON report.
    let per_layer = std::fs::read_to_string(o("per_layer.csv")).unwrap();
    for (j, line) in per_layer.lines().skip(1).enumerate() {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(v, report["per_layer_avg"][j].as_f64().unwrap());
    }
    let pairwise = std::fs::read_to_string(o("pairwise.csv")).unwrap();
    assert_eq!(pairwise.lines().count(), 1 + 4 * 3 / 2);
    for line in pairwise.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (i, j): (usize, usize) = (f[0].parse().unwrap(), f[1].parse().unwrap());
        assert_eq!(f[2].parse::<f64>().unwrap(), report["pairwise"][i][j].as_f64().unwrap());
    }
}

#[test]
fn checkpoint_mismatches_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_workspace(dir.path());
    let out = dir.path().join("out");
    ok(&["train-teacher", s(&cfg)]);
    let teacher = out.join("teacher.ckpt");

    // A plan built for another depth.
    let other = dir.path().join("other");
    ok(&[
        "plan",
        s(&repo_root().join("configs/tinyllama.json")),
        "--out",
        s(&other),
    ]);
    let (status, doc) = error_of(&[
        "distill",
        s(&cfg),
        "--teacher",
        s(&teacher),
        "--plan",
        s(&other.join("plan.json")),
    ]);
    assert_eq!((status, code(&doc)), (5, "plan_mismatch"));

    // A config whose architecture differs from the checkpoint.
    let mut wide = read_json(&cfg);
    wide["model"]["d_model"] = 32.into();
    let wide_path = dir.path().join("wide.json");
    std::fs::write(&wide_path, wide.to_string()).unwrap();
    let (status, doc) = error_of(&["eval", s(&wide_path), "--checkpoint", s(&teacher)]);
    assert_eq!((status, code(&doc)), (6, "architecture_mismatch"));

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let (status, doc) = error_of(&["eval", s(&cfg), "--checkpoint", s(&junk)]);
    assert_eq!((status, code(&doc)), (7, "bad_checkpoint"));

    let (status, doc) = error_of(&["analyze", s(&cfg), "--checkpoint", s(&dir.path().join("gone.ckpt"))]);
    assert_eq!((status, code(&doc)), (4, "missing_file"));
}

fn file_bytes(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn seed_override_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_workspace(dir.path());
    let run = |seed: &str, out: &str| {
        let out = dir.path().join(out);
        let o = echoatt_env(&["train-teacher", s(&cfg), "--out", s(&out)], &[("ECHOATT_SEED", seed)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        file_bytes(&out, "teacher.ckpt")
    };
    let a = run("11", "a");
    let b = run("11", "b");
    let c = run("12", "c");
    assert_eq!(a, b);
    assert_ne!(a, c);
}
