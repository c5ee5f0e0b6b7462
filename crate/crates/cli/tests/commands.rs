use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cowork(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cowork")).args(args).output().unwrap()
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_without_scenario_is_usage_error() {
    assert_eq!(cowork(&["run", "--headless"]).status.code(), Some(2));
}

#[test]
fn phase_two_without_init_is_usage_error() {
    let out = cowork(&["train", "--phase", "2", "--profile", "prefers_green"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--init"));
}

#[test]
fn zero_episodes_writes_empty_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = cowork(&["train", "--phase", "1", "--episodes", "0", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap(), "");
    assert!(dir.path().join("qtable.json").exists());
}

#[test]
fn phase_one_then_phase_two() {
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("p1");
    let out = cowork(&["train", "--phase", "1", "--episodes", "3000", "--seed", "2", "--out", s(&p1)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(p1.join("trace.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = trace.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3000);
    for l in &lines {
        let sum = l["total_RT"].as_f64().unwrap() + l["total_RH"].as_f64().unwrap();
        assert_eq!(l["total_R"].as_f64().unwrap(), sum);
        assert_eq!(l["total_RH"].as_f64().unwrap(), 0.0);
    }
    assert!(lines[2950..].iter().all(|l| l["greedy_steps"] == 5));

    let p2 = dir.path().join("p2");
    let table = p1.join("qtable.json");
    let args = ["train", "--phase", "2", "--init", s(&table), "--episodes", "50", "--out", s(&p2)];
    let out = cowork(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["phase"], 2);
    for f in ["qtable.json", "trace.jsonl", "scratch_trace.jsonl"] {
        assert!(p2.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(p2.join("trace.jsonl")).unwrap().lines().count(), 50);
}

#[test]
fn corpus_has_two_hundred_windows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    assert_eq!(cowork(&["corpus", "--out", s(&path)]).status.code(), Some(0));
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 200);
    assert_eq!(text.matches("\"label\":\"blink\"").count(), 100);
}

#[test]
fn invalid_scenario_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"blocks": ["blue"], "initial": {"ontable": ["blue"]}, "profile": {"preferred_block": 3}}"#)
        .unwrap();
    let out = cowork(&["run", "--headless", "--scenario", s(&path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("profile.preferred_block"));
}

#[test]
fn headless_runs_are_deterministic_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = repo_file("scenarios/default.json");
    let script = repo_file("scenarios/demo_script.json");
    let mut logs = Vec::new();
    for name in ["a.jsonl", "b.jsonl"] {
        let log = dir.path().join(name);
        let args = ["run", "--headless", "--seed", "7", "--scenario", s(&scenario), "--script", s(&script), "--log", s(&log)];
        let out = cowork(&args);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        logs.push(std::fs::read(&log).unwrap());
    }
    assert!(!logs[0].is_empty());
    assert_eq!(logs[0], logs[1]);

    let out = cowork(&["replay", "--log", s(&dir.path().join("a.jsonl"))]);
    assert_eq!(out.status.code(), Some(0));
    let view: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(view["view"]["plan"]["state"], "done");
    assert_eq!(view["view"]["plan"]["claimed"], serde_json::json!(["green"]));
}

#[test]
fn busy_port_is_runtime_error() {
    let holder = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = holder.local_addr().unwrap().port().to_string();
    let scenario = repo_file("scenarios/default.json");
    let out = cowork(&["run", "--scenario", s(&scenario), "--port", &port]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&port));
}
