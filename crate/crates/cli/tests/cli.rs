//! End-to-end tests of the `kvzap` binary: exit codes, error JSON, file
//! outputs, idempotence, and a short full-pipeline run.

use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_kvzap"));
    c.env_remove("KVZAP_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("stderr not JSON ({e}): {text}"))
}

#[test]
fn overhead_paper_table_exits_zero_under_a_second() {
    let start = Instant::now();
    let out = run(&["overhead", "--paper-table"]);
    assert!(start.elapsed().as_secs_f64() < 1.0, "took {:?}", start.elapsed());
    assert!(out.status.success());
    let text = stdout(&out);
    for needle in ["Qwen3-8B", "Llama-3.1-8B", "Qwen3-32B", "1.09%", "0.96%", "0.67%"] {
        assert!(text.contains(needle), "missing {needle} in:\n{text}");
    }
}

#[test]
fn overhead_without_flags_is_config_error() {
    let out = run(&["overhead"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "config");
}

#[test]
fn overhead_custom_spec_csv() {
    let out = run(&["overhead", "--csv", "--spec", "toy,4,2,16,64,128"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("toy,4,2,16,64,128,73728,1056,256"), "{text}");
}

#[test]
fn bad_spec_is_config_error() {
    let out = run(&["overhead", "--spec", "oops,1,2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let policy = dir.path().join("p.json");
    std::fs::write(&policy, r#"{"policy":"full"}"#).unwrap();
    let out = run(&[
        "eval",
        "--out",
        dir.path().join("o").to_str().unwrap(),
        "--checkpoint",
        dir.path().join("nope.kvzl").to_str().unwrap(),
        "--policy",
        policy.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["error"]["kind"], "validation");
}

#[test]
fn unknown_policy_key_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_quick_teacher(dir.path());
    let policy = dir.path().join("p.json");
    std::fs::write(&policy, r#"{"policy":"full","bogus":1}"#).unwrap();
    let out = run(&[
        "eval",
        "--out",
        dir.path().join("o").to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--policy",
        policy.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "config");
}

/// Train a deliberately tiny-budget teacher and return the checkpoint path.
fn train_quick_teacher(dir: &Path) -> std::path::PathBuf {
    let tdir = dir.join("teacher");
    let out = run(&[
        "train-teacher",
        "--out",
        tdir.to_str().unwrap(),
        "--steps",
        "20",
        "--batch",
        "2",
        "--copy-min",
        "4",
        "--copy-max",
        "8",
        "--pairs-min",
        "2",
        "--pairs-max",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    tdir.join("teacher.kvzl")
}

#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_quick_teacher(dir.path());
    assert!(ckpt.exists());
    assert!(dir.path().join("teacher/loss.csv").exists());
    assert!(dir.path().join("teacher/config-echo.json").exists());
    assert!(dir.path().join("teacher/summary.json").exists());

    // score
    let sdir = dir.path().join("score");
    let out = run(&[
        "score",
        "--out",
        sdir.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--prompt-len",
        "16",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(sdir.join("scores.kvzs").exists());
    assert!(sdir.join("scores.csv").exists());

    // dataset
    let ddir = dir.path().join("ds");
    let out = run(&[
        "gen-dataset",
        "--out",
        ddir.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--train-seeds",
        "0..4",
        "--val-seeds",
        "100..102",
        "--tokens-per-prompt",
        "20",
        "--positions-per-prompt",
        "10",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dataset = ddir.join("dataset.kvzd");

    // linear surrogate
    let ldir = dir.path().join("lin");
    let out = run(&[
        "train-surrogate",
        "--out",
        ldir.to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--kind",
        "linear",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let surrogate = ldir.join("surrogate.kvzp");
    assert!(ldir.join("r2.csv").exists());

    // eval: full policy removes nothing
    let policy = dir.path().join("full.json");
    std::fs::write(&policy, r#"{"policy":"full"}"#).unwrap();
    let edir = dir.path().join("eval-full");
    let out = run(&[
        "eval",
        "--out",
        edir.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--policy",
        policy.to_str().unwrap(),
        "--tasks",
        "copy",
        "--n-tasks",
        "4",
        "--copy-len",
        "8",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(edir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["removed_fraction_mean"], 0.0);
    // A near-untrained teacher is near chance on a 58-letter alphabet.
    assert!(eval["accuracy"].as_f64().unwrap() < 0.3);

    // sweep: removed fraction grows with tau
    let wdir = dir.path().join("sweep");
    let out = run(&[
        "sweep",
        "--out",
        wdir.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--surrogate",
        surrogate.to_str().unwrap(),
        "--policy",
        "kvzap",
        "--values=-12,-4,0,4",
        "--window",
        "2",
        "--tasks",
        "copy",
        "--n-tasks",
        "3",
        "--copy-len",
        "8",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(wdir.join("sweep.csv")).unwrap();
    assert!(csv.starts_with(
        "task_kind,policy,param_name,param_value,seed,accuracy,removed_fraction,compression_factor,live_bytes,resident_bytes\n"
    ));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(wdir.join("summary.json")).unwrap())
            .unwrap();
    let mut curve: Vec<(f64, f64)> = summary["curve"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| {
            (
                p["param_value"].as_f64().unwrap(),
                p["removed_fraction_mean"].as_f64().unwrap(),
            )
        })
        .collect();
    curve.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for w in curve.windows(2) {
        assert!(
            w[1].1 >= w[0].1,
            "removed fraction not monotone in tau: {curve:?}"
        );
    }
}

#[test]
fn eval_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_quick_teacher(dir.path());
    let policy = dir.path().join("full.json");
    std::fs::write(&policy, r#"{"policy":"full"}"#).unwrap();
    let args = |o: &Path| -> Vec<String> {
        [
            "eval",
            "--out",
            o.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--policy",
            policy.to_str().unwrap(),
            "--n-tasks",
            "3",
            "--copy-len",
            "6",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    };
    let o = dir.path().join("o");
    assert!(bin().args(args(&o)).status().unwrap().success());
    let first = std::fs::read(o.join("eval.json")).unwrap();
    let first_echo = std::fs::read(o.join("config-echo.json")).unwrap();
    assert!(bin().args(args(&o)).status().unwrap().success());
    assert_eq!(first, std::fs::read(o.join("eval.json")).unwrap());
    assert_eq!(first_echo, std::fs::read(o.join("config-echo.json")).unwrap());
}

#[test]
fn kvzap_out_env_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let ignored = dir.path().join("ignored");
    let actual = dir.path().join("actual");
    let out = bin()
        .env("KVZAP_OUT", &actual)
        .args([
            "overhead",
            "--paper-table",
            "--out",
            ignored.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(actual.join("overhead.csv").exists());
    assert!(!ignored.exists());
}
