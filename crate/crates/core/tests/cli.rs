use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_policy-landscape");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn meta(dir: &Path, csv: &str) -> String {
    fs::read_to_string(dir.join(format!("{csv}.meta"))).unwrap()
}

#[test]
fn default_output_names_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["tabular", "--n-states", "6", "--n-actions", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("tabular.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "iteration,loss,optimality_gap,grad_norm,step_size,wall_time_s");
    let m = meta(dir.path(), "tabular.csv");
    for key in ["experiment=tabular", "n_states=6", "n_actions=3", "seed=1", "gamma=0.9", "version=", "oracle_optimum=", "oracle_provenance="] {
        assert!(m.contains(key), "missing {key} in\n{m}");
    }
    assert!(!m.contains("threads"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "# small run\nn_states = 5\nn_actions = 2 # two actions\nseed = 4\n").unwrap();
    let out = run(dir.path(), &["tabular", "--config", "run.cfg", "--seed", "7", "--output", "t.csv"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let m = meta(dir.path(), "t.csv");
    assert!(m.contains("n_states=5\n") && m.contains("n_actions=2\n") && m.contains("seed=7\n"), "{m}");
}

#[test]
fn config_errors_exit_one_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "n_sates = 5\n").unwrap();
    for (args, field) in [
        (vec!["tabular", "--config", "bad.cfg"], "n_sates"),
        (vec!["lqr", "--gamma", "1.5"], "gamma"),
        (vec!["stopping", "--n-offers", "many"], "n_offers"),
        (vec!["inventory", "--backlog-cost", "0.5"], "backlog_cost"),
    ] {
        let out = run(dir.path(), &args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(stderr(&out).contains(field), "{args:?}: {}", stderr(&out));
    }
    assert_eq!(run(dir.path(), &["no-such-experiment"]).status.code(), Some(1));
}

#[test]
fn runtime_failure_exits_two_and_flushes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["verify-approximation", "--n", "1", "--max-iters", "1"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("verify-approximation.csv")).unwrap();
    assert!(csv.starts_with("case,"));
    assert!(meta(dir.path(), "verify-approximation.csv").contains("failure="));

    let out = run(dir.path(), &["stopping", "--max-iters", "3", "--n-contexts", "2", "--n-offers", "4"]);
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(dir.path().join("stopping.csv")).unwrap().lines().count(), 5);
}

#[test]
fn verify_descent_batch() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["verify-descent", "--n", "100", "--seed", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("verify-descent.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().all(|r| r.ends_with(",true")));
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    for (threads, name) in [("1", "a.csv"), ("3", "b.csv")] {
        let out = run(dir.path(), &["reinforce-check", "--n-paths", "2000", "--threads", threads, "--output", name]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let read = |f: &str| fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    let strip = |m: String| m.lines().filter(|l| !l.starts_with("output=")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(meta(dir.path(), "a.csv")), strip(meta(dir.path(), "b.csv")));
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["--help"]).status.success());
    assert!(run(dir.path(), &["--version"]).status.success());
}
