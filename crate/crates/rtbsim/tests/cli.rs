use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const RUN_CONFIG: &str = r#"{
  "config": {"n": 4, "f": 1, "fanout": 2, "link_delay": 1000, "round": 8000, "loss_prob": 0.2, "seed": 3},
  "adversary": {"behavior": "equivocate", "count": 1}
}"#;

const SWEEP_CONFIG: &str = r#"{
  "base": {"n": 4, "f": 1, "fanout": 2, "link_delay": 1000, "round": 8000, "loss_prob": 0.0},
  "sweep": {"loss_prob": [0.0, 0.3]},
  "runs_per_point": 4
}"#;

fn rtbsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtbsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn run_writes_trace_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.json", RUN_CONFIG);
    let trace = dir.path().join("t.jsonl");
    let csv = dir.path().join("s.csv");
    let out = rtbsim(&[
        "run",
        "--config",
        &cfg,
        "--runs",
        "2",
        "--trace",
        trace.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 2);
    assert!(stdout.starts_with("seed=3 hash="));
    let lines = fs::read_to_string(&trace).unwrap();
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("kind").is_some());
    }
    let csv = fs::read_to_string(&csv).unwrap();
    assert!(csv.starts_with("n,f,fanout,"));
    assert_eq!(csv.lines().count(), 1 + 6);
}

#[test]
fn run_is_reproducible_with_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.json", RUN_CONFIG);
    let a = rtbsim(&["run", "--config", &cfg, "--seed", "11", "--recovery", "on"]);
    let b = rtbsim(&["run", "--config", &cfg, "--seed", "11", "--recovery", "on"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).starts_with("seed=11 "));
}

#[test]
fn sweep_csv_is_sorted_and_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sweep.json", SWEEP_CONFIG);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let out = rtbsim(&["sweep", "--config", &cfg, "--out", p.to_str().unwrap()]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 6);
    assert!(rows[..6].iter().all(|r| r.contains(",0,stub,")));
    assert!(rows[6..].iter().all(|r| r.contains(",0.3,stub,")));
}

#[test]
fn sweep_to_stdout_with_runs_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sweep.json", SWEEP_CONFIG);
    let out = rtbsim(&["sweep", "--config", &cfg, "--runs", "2"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",2,0,1")));
}

#[test]
fn check_runs_selected_criteria() {
    let out = rtbsim(&["check", "--only", "5,9"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("criterion 5 ") && lines[0].contains(" PASS "));
    assert!(lines[1].starts_with("criterion 9 ") && lines[1].contains(" PASS "));
}

#[test]
fn bad_input_exits_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.json", r#"{"config": {"n": 3}}"#);
    let out = rtbsim(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let invalid = write(
        dir.path(),
        "invalid.json",
        r#"{"config": {"n": 4, "f": 2, "fanout": 2, "link_delay": 1000, "round": 8000, "loss_prob": 0.0}}"#,
    );
    let out = rtbsim(&["run", "--config", &invalid]);
    assert_eq!(out.status.code(), Some(2));
    let out = rtbsim(&["run", "--config", "/nonexistent/x.json"]);
    assert_eq!(out.status.code(), Some(2));
}
