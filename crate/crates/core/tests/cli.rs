use std::path::Path;
use std::process::{Command, Output};

fn coherence(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coherence"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn check(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

const QUICK: &[&str] = &[
    "--set", "regime=\"contrastive\"", "--set", "max_steps=30", "--set", "eval_every=10",
    "--set", "learning_rate=0.002", "--set", "lr_floor=0.0005", "--set", "dim=16", "--set", "layers=1",
];

#[test]
fn generate_train_evaluate_score_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    check(&coherence(
        &["generate", "--corpus", "builtin:synthetic", "--synthetic-docs", "40", "--holdout-docs", "10",
          "--repetitions", "2", "--seed", "3", "--out", "data"],
        d,
    ));
    for f in ["corpus.jsonl", "instances.jsonl", "dev_pairs.jsonl", "test_pairs.jsonl", "manifest.json"] {
        assert!(d.join("data").join(f).exists(), "{f} missing");
    }

    let mut args = vec!["train", "--data", "data", "--seed", "1", "--out", "run"];
    args.extend_from_slice(QUICK);
    check(&coherence(&args, d));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["steps"], 30);
    assert!(d.join("run/train_log.jsonl").exists());
    assert!(d.join("run/manifest.json").exists());

    check(&coherence(
        &["evaluate", "--checkpoint", "run/last", "--pairs", "data/test_pairs.jsonl", "--out", "eval"],
        d,
    ));
    let eval: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("eval/report.json")).unwrap()).unwrap();
    let acc = eval["value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    check(&coherence(
        &["evaluate", "--checkpoint", "run/last", "--pairs", "data/probes.jsonl", "--metric", "probe", "--out", "probe"],
        d,
    ));

    check(&coherence(
        &["score", "--checkpoint", "run/last", "--docs", "data/corpus.jsonl", "--out", "scores.jsonl"],
        d,
    ));
    let scores = std::fs::read_to_string(d.join("scores.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = scores.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 40);
    assert!(lines.iter().all(|l| l["score"].is_f64()));

    let mut args = vec!["sweep", "--data", "data", "--seeds", "1,2", "--grid", "negatives=1,2", "--out", "sweep"];
    args.extend_from_slice(QUICK);
    check(&coherence(&args, d));
    assert!(d.join("sweep/sweep_report.json").exists());
    assert!(d.join("sweep/manifest.json").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    // missing required seed
    let out = coherence(&["generate", "--corpus", "builtin:synthetic", "--out", "x"], d);
    assert_eq!(out.status.code(), Some(1));
    // unreadable corpus
    let out = coherence(&["generate", "--corpus", "nope.jsonl", "--seed", "1", "--out", "x"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.join("x").exists());
    // unknown config key
    check(&coherence(
        &["generate", "--corpus", "builtin:synthetic", "--synthetic-docs", "20", "--holdout-docs", "5",
          "--repetitions", "1", "--seed", "3", "--out", "data"],
        d,
    ));
    let out = coherence(&["train", "--data", "data", "--seed", "1", "--set", "bogus=1", "--out", "r"], d);
    assert_eq!(out.status.code(), Some(1));
}
