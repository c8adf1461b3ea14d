use std::fs;
use std::process::{Command, Output};

fn nacb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nacb")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn written_fixture_analyzes_like_the_builtin() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pcycle.json");
    let path = path.to_str().unwrap();
    assert!(nacb(&["envs", "--write", "pcycle:3:2", "--out", path]).status.success());

    let theta = "0.3,-0.2,1,0,-1,0.5";
    let from_file = nacb(&["analyze", "--mdp", path, "--theta", theta]);
    let builtin = nacb(&["analyze", "--env", "pcycle:3:2", "--theta", theta]);
    assert!(from_file.status.success(), "{}", String::from_utf8_lossy(&from_file.stderr));
    assert_eq!(stdout(&from_file), stdout(&builtin));

    let report: serde_json::Value = serde_json::from_str(&stdout(&builtin)).unwrap();
    assert_eq!(report["chain"]["period"], 3);
    assert_eq!(report["j_star"], 1.0);
}

#[test]
fn train_writes_a_full_trace_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"epochs": 4, "inner": 3, "batch": 5, "seed": 11}"#).unwrap();
    let config = config.to_str().unwrap();
    let diag = dir.path().join("diag.json");
    let diag = diag.to_str().unwrap();

    let first = nacb(&["train", "--env", "rand:8:3:2:7", "--config", config, "--diagnostics", diag]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let trace = stdout(&first);
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("step,reward,cumulative_regret"));
    assert_eq!(lines.count(), 2 * 4 * 3 * 5);

    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(diag).unwrap()).unwrap();
    assert_eq!(summary["epochs"].as_array().unwrap().len(), 4);
    assert_eq!(summary["horizon"], 120);

    let second = nacb(&["train", "--env", "rand:8:3:2:7", "--config", config]);
    assert_eq!(trace, stdout(&second));
}

#[test]
fn bad_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"epochs": 4, "momentum": 0.9}"#).unwrap();
    let out = nacb(&["train", "--env", "bandit", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let mdp = dir.path().join("mdp.json");
    fs::write(&mdp, r#"{"n_states": 1, "n_actions": 1, "transitions": [], "rewards": [], "initial_dist": [1.0], "gamma": 1}"#).unwrap();
    assert_eq!(nacb(&["analyze", "--mdp", mdp.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(nacb(&["analyze", "--env", "bandit", "--theta", "1"]).status.code(), Some(2));
    assert_eq!(nacb(&["verify", "--level", "medium"]).status.code(), Some(2));
}

#[test]
fn sweep_writes_stable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let run = nacb(&["sweep", "--env", "bandit", "--tmin", "1024", "--tmax", "4096", "--points", "3", "--seeds", "2", "--out", out.to_str().unwrap()]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let csv = fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("env,target,effective,seed,regret,regret_per_step,error"));
    assert_eq!(lines.count(), 6);
}

#[test]
fn fast_verification_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("report.json");
    let out = nacb(&["verify", "--level", "fast", "--json", json.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
    assert!(report["checks"].as_array().unwrap().iter().all(|c| c["status"] == "pass"));
}
