use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_contseq"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn synth(dir: &Path, subjects: &str) {
    ok(
        &["gen-synth", "--subjects", subjects, "--seed", "7", "--out", "d.csv", "--context", "c.csv", "--manifest", "m.json"],
        dir,
    );
}

#[test]
fn gen_synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-synth", "--subjects", "50", "--seed", "7", "--out", "a.csv"], d);
    ok(&["gen-synth", "--subjects", "50", "--seed", "7", "--out", "b.csv"], d);
    assert_eq!(std::fs::read(d.join("a.csv")).unwrap(), std::fs::read(d.join("b.csv")).unwrap());
    ok(&["gen-synth", "--subjects", "50", "--seed", "8", "--out", "c.csv"], d);
    assert_ne!(std::fs::read(d.join("a.csv")).unwrap(), std::fs::read(d.join("c.csv")).unwrap());
}

#[test]
fn train_then_evaluate_reproduces_validation_metric() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "30");
    let stdout = ok(
        &[
            "train", "--data", "d.csv", "--context", "c.csv", "--model", "ncde", "--scheme", "hermite", "--causal",
            "copy", "--epochs", "2", "--latent", "4", "--hidden", "8", "--seed", "3", "--out", "model.ckpt",
        ],
        d,
    );
    assert!(stdout.contains("validation auprc"));
    assert!(d.join("model.ckpt").is_file() && d.join("model.json").is_file());
    let hist = json(&d.join("model.history.json"));
    assert_eq!(hist["history"]["records"].as_array().unwrap().len(), 3);
    let val = hist["validation"].as_f64().unwrap();

    ok(
        &["evaluate", "--data", "d.csv", "--context", "c.csv", "--checkpoint", "model.ckpt", "--out", "e.json", "--trace-csv", "t.csv"],
        d,
    );
    let got = json(&d.join("e.json"))["value"].as_f64().unwrap();
    assert!((got - val).abs() <= 1e-12, "{got} vs {val}");
    let trace = std::fs::read_to_string(d.join("t.csv")).unwrap();
    assert!(trace.starts_with("step,s,accepted,err_norm,dt"));
    assert!(trace.lines().count() > 1);
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "20");
    std::fs::write(
        d.join("run.json"),
        r#"{"model": {"kind": "rnn", "latent": 3, "hidden": 4}, "preprocess": {"causal": "none"}, "train": {"epochs": 1, "seed": 5}}"#,
    )
    .unwrap();
    ok(&["train", "--data", "d.csv", "--context", "c.csv", "--config", "run.json", "--hidden", "6", "--out", "m.ckpt"], d);
    let side = json(&d.join("m.json"));
    assert_eq!(side["config"]["kind"], "rnn");
    assert_eq!(side["config"]["hidden"], 6);
    assert_eq!(side["config"]["latent"], 3);
    assert_eq!(side["preprocess"]["causal"], "none");
    assert_eq!(side["split"]["seed"], 5);
}

#[test]
fn preprocess_and_interpolate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "12");
    ok(
        &["preprocess", "--data", "d.csv", "--context", "c.csv", "--scheme", "recticubic", "--out", "cache.bin", "--manifest", "pm.json"],
        d,
    );
    let m = json(&d.join("pm.json"));
    assert_eq!(m["scheme"], "recticubic");
    assert_eq!(m["causal"], "recti");
    assert_eq!(m["schema_version"], 1);
    let n_train = m["train_subjects"].as_array().unwrap().len();
    let n_test = m["test_subjects"].as_array().unwrap().len();
    assert_eq!(n_train + n_test, 12);
    assert!(m["standardizer"]["feature_mean"].is_array());

    ok(&["interpolate", "--cache", "cache.bin", "--subject", "1", "--step", "0.25", "--out", "x.csv"], d);
    let csv = std::fs::read_to_string(d.join("x.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header, "s,feature0,feature1,feature2,count0,count1,count2,time");
    let first: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(first[0], 0.0);
}

#[test]
fn cv_and_grid_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "12");
    let out = ok(
        &["cv", "--data", "d.csv", "--context", "c.csv", "--model", "rnn", "--causal", "none", "--epochs", "1", "--folds", "3", "--out", "cv.json"],
        d,
    );
    assert!(out.contains("over 3 folds"));
    assert_eq!(json(&d.join("cv.json"))["report"]["folds"].as_array().unwrap().len(), 3);

    std::fs::write(
        d.join("grid.json"),
        r#"{"schema_version": 1, "base": {"model": {"kind": "rnn", "latent": 3, "hidden": 4}, "train": {"epochs": 1}}, "folds": 3, "causal": ["copy", "none"]}"#,
    )
    .unwrap();
    let args = ["grid", "--data", "d.csv", "--context", "c.csv", "--config", "grid.json", "--out", "g1.json", "--table", "t.md"];
    let table = ok(&args, d);
    assert!(table.contains("| rank |") && table.contains("±"));
    let mut again = args;
    again[8] = "g2.json";
    ok(&again, d);
    assert_eq!(std::fs::read(d.join("g1.json")).unwrap(), std::fs::read(d.join("g2.json")).unwrap());
    assert_eq!(std::fs::read_to_string(d.join("t.md")).unwrap(), table);
}

#[test]
fn usage_errors_exit_two_and_runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(&["frobnicate"], d).status.code(), Some(2));
    assert_eq!(run(&["train", "--bogus-flag"], d).status.code(), Some(2));
    assert_eq!(run(&["train", "--data", "x.csv", "--out", "m", "--model", "transformer"], d).status.code(), Some(2));
    let out = run(&["train", "--data", "missing.csv", "--out", "m.ckpt"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));
    synth(d, "10");
    let out = run(&["train", "--data", "d.csv", "--model", "latentode", "--scheme", "recticubic", "--out", "m.ckpt"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
