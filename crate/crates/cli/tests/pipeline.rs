use std::path::Path;
use std::process::{Command, Output};

fn dynmf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynmf")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dynmf(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const SPEC: &str = r#"{"k_true": 3, "n": 24, "tau": 8, "vocab_size": 90, "tokens_per_period": 25.0,
"dim": 6, "drift": {"mode": "mixed", "switch_period": 4, "period_length": 2}, "seed": 3}"#;

const MODEL: &[&str] =
    &["--events", "data/events.jsonl", "--embeddings", "data/embeddings.txt", "--k", "3", "--epochs", "20", "--lr", "0.01"];

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("spec.json"), SPEC).unwrap();
    ok(dir, &["synth", "--spec", "spec.json", "--out", "data"]);
    for f in ["events.jsonl", "truth.json", "embeddings.txt"] {
        assert!(dir.join("data").join(f).exists(), "{f}");
    }

    let mut train = vec!["train", "--out", "model.ckpt", "--holdout", "1"];
    train.extend_from_slice(MODEL);
    let summary = ok(dir, &train);
    assert!(summary.contains("model.ckpt"), "{summary}");
    for f in ["model.ckpt", "model.ckpt.meta.json", "model.ckpt.log.jsonl"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(dir.join("model.ckpt.log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first.get("total_loss").is_some());

    ok(dir, &["eval", "--ckpt", "model.ckpt", "--events", "data/events.jsonl", "--a", "1", "--k", "1,5", "--out", "eval.csv"]);
    let eval = std::fs::read_to_string(dir.join("eval.csv")).unwrap();
    assert!(eval.lines().next().unwrap().contains("mp@5"), "{eval}");

    ok(dir, &["trajectories", "--ckpt", "model.ckpt", "--events", "data/events.jsonl", "--out", "traj.csv"]);
    let traj = std::fs::read_to_string(dir.join("traj.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 24 * 8);

    std::fs::write(dir.join("demo.json"), r#"{"zip": "z1"}"#).unwrap();
    ok(dir, &["coldstart", "--demographics", "demo.json", "--store", "traj.jsonl", "--out", "cold.json"]);
    let cold: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("cold.json")).unwrap()).unwrap();
    let weights: Vec<f64> = serde_json::from_value(cold["u"].clone()).unwrap();
    assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    ok(dir, &["intrude", "--ckpt", "model.ckpt", "--out", "items.json"]);
    assert!(dir.join("items.json").exists());

    ok(dir, &["infer", "--ckpt", "model.ckpt", "--events", "data/events.jsonl", "--out", "infer.jsonl"]);
    assert_eq!(std::fs::read_to_string(dir.join("infer.jsonl")).unwrap().lines().count(), 24);
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["gradcheck", "--out", "grad.json"]);
    assert!(out.to_lowercase().contains("pass"), "{out}");
}

#[test]
fn bad_settings_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dynmf(tmp.path(), &["train", "--alpha", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
}
