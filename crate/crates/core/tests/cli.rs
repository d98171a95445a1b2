//! Command-line contract: outputs, exit codes and artifacts.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn teamform(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_teamform"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .display()
        .to_string()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

#[test]
fn match_reproduces_the_ordering_fixture() {
    let out = teamform(&[
        "match",
        &fixture("ordering.json"),
        "--algorithm",
        "oom",
        "--certify",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = stdout_json(&out);
    assert_eq!(v["teams"][0]["leader"], 0);
    assert_eq!(v["teams"][0]["followers"], serde_json::json!([3, 4]));
    assert_eq!(v["teams"][1]["leader"], 1);
    assert_eq!(v["teams"][1]["followers"], serde_json::json!([2]));
    assert_eq!(v["blocking_pairs"], serde_json::json!([]));
    assert_eq!(v["certified"], true);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(
        teamform(&["match", "--no-such-flag"]).status.code(),
        Some(2)
    );
    assert_eq!(teamform(&[]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_rate = fast\n").unwrap();
    let run = dir.path().join("run");
    let out = teamform(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let prefs = dir.path().join("prefs.json");
    std::fs::write(
        &prefs,
        r#"{"agents": 3, "leaders": 1, "scores": [[0.0, 1.0]]}"#,
    )
    .unwrap();
    assert_eq!(
        teamform(&["match", prefs.to_str().unwrap()]).status.code(),
        Some(2)
    );
}

#[test]
fn check_passes() {
    let out = teamform(&["check", "--seed", "3"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn describe_lists_the_parameters() {
    let out = teamform(&["--describe"]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    let params = v["parameters"].as_array().unwrap();
    assert!(params.iter().any(|p| p["name"]
        .as_str()
        .is_some_and(|n| n.starts_with("utility.encoder"))));
    assert!(v["scalars"].as_u64().unwrap() > 0);
}

#[test]
fn train_eval_and_replay_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = teamform(&[
        "train",
        "--steps",
        "300",
        "--episodes",
        "2",
        "--seed",
        "1",
        "--quiet",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in ["metrics.csv", "final.tfrm", "config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let eval_dir = dir.path().join("eval");
    let trace = dir.path().join("trace.jsonl");
    let out = teamform(&[
        "eval",
        "--checkpoint",
        run.join("final.tfrm").to_str().unwrap(),
        "--agents",
        "4",
        "--leaders",
        "2",
        "--episodes",
        "3",
        "--seeds",
        "2",
        "--trace",
        trace.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    let out = teamform(&["replay", trace.to_str().unwrap()]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(!out.stdout.is_empty());

    let missing = teamform(&[
        "eval",
        "--checkpoint",
        dir.path().join("nope.tfrm").to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(1));
}
