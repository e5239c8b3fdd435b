//! End-to-end checks of the command-line surface: every subcommand, config
//! file handling, and flag overrides.

use std::path::Path;
use std::process::Command;

fn twa() -> Command {
    Command::new(env!("CARGO_BIN_EXE_twa"))
}

fn small_args(out_dir: &Path) -> Vec<String> {
    [
        "--m",
        "200",
        "--epochs",
        "8",
        "--sample-limit",
        "6",
        "--twa-steps",
        "10",
        "--twa-batch-size",
        "32",
        "--sgd-batch-size",
        "32",
        "--lr-decay-epochs",
        "5,7",
        "--seed",
        "3",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([
        "--output-dir".to_string(),
        out_dir.to_string_lossy().into_owned(),
    ])
    .collect()
}

fn run_json(mut cmd: Command) -> serde_json::Value {
    let output = cmd.output().expect("binary runs");
    assert!(
        output.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&output.stderr),
        String::from_utf8_lossy(&output.stdout)
    );
    serde_json::from_slice(&output.stdout).expect("stdout is JSON")
}

#[test]
fn train_then_average_then_twa() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let args = small_args(&out);

    let report = run_json({
        let mut c = twa();
        c.arg("train").args(&args);
        c
    });
    assert_eq!(report["mode"], "sgd");
    assert_eq!(report["n_checkpoints"], 6);
    assert!(out.join("checkpoints/manifest.json").exists());
    assert!(out.join("sgd_final.twa1").exists());

    let swa = run_json({
        let mut c = twa();
        c.args(["average", "--mode", "swa"]).args(&args);
        c
    });
    assert_eq!(swa["mode"], "swa");
    assert!(out.join("report_swa.json").exists());

    let lawa = run_json({
        let mut c = twa();
        c.args(["average", "--mode", "lawa", "--lawa-t", "2"]).args(&args);
        c
    });
    assert_eq!(lawa["mode"], "lawa");

    let soup = run_json({
        let mut c = twa();
        c.args(["average", "--mode", "soup"]).args(&args);
        c
    });
    assert_eq!(soup["mode"], "greedy_soup");

    let report = run_json({
        let mut c = twa();
        c.arg("twa").args(&args);
        c
    });
    assert_eq!(report["mode"], "twa");
    assert_eq!(report["steps"], 10);
    assert!(out.join("history_twa.jsonl").exists());
    assert!(out.join("solution_twa.twa1").exists());

    let by_layer = run_json({
        let mut c = twa();
        c.args(["twa", "--by-layer", "--groups", "4", "--dist-k", "2", "--val-data"])
            .args(&args);
        c
    });
    assert_eq!(by_layer["mode"], "twa_by_layer");

    // the stored solution evaluates to the same numbers
    let eval = run_json({
        let mut c = twa();
        c.args([
            "eval",
            "--weights",
            out.join("solution_twa.twa1").to_str().unwrap(),
        ])
        .args(&args);
        c
    });
    assert_eq!(eval["mode"], "eval");
    assert_eq!(eval["test_acc"], report["test_acc"]);
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    // start from the desk defaults, shrink, and save as a config file
    let args = small_args(&out);
    let config_path = dir.path().join("exp.json");

    // produce a config by resolving flags once through the CLI train path
    let report = run_json({
        let mut c = twa();
        c.arg("train").args(&args);
        c
    });
    assert_eq!(report["seed"], 3);

    // hand-write a config document mirroring those fields
    let config = serde_json::json!({
        "model": {"layer_sizes": [2, 16, 2], "activation": "relu", "seed": 9},
        "data": {"kind": "two_gaussians", "m": 200, "noise": 0.3,
                 "split": [0.7, 0.15, 0.15]},
        "sgd": {"lr": 0.01, "momentum": 0.9, "weight_decay": 1e-4, "epochs": 6,
                "batch_size": 32, "lr_decay_epochs": [4], "lr_decay_factor": 0.1},
        "sampling": {"mode": "every_n_epochs", "n": 1, "phase": "head", "limit": 5},
        "twa": {"eta0": 0.1, "lambda": 1e-5, "steps": 8, "schedule": "scaled_linear",
                "scale_factor": 1.0, "batch_size": 32, "seed": 11,
                "data_source": "train"},
        "output_dir": dir.path().join("from_config"),
        "seed": 21
    });
    std::fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();

    let report = run_json({
        let mut c = twa();
        c.args(["train", "--config", config_path.to_str().unwrap(), "--epochs", "4"]);
        c
    });
    assert_eq!(report["seed"], 21);
    // 4 epochs (override) with a per-epoch policy capped at 5
    assert_eq!(report["n_checkpoints"], 4);
}

#[test]
fn gaussian_study_and_bench_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let study = run_json({
        let mut c = twa();
        c.args([
            "gaussian-study",
            "--dim",
            "8",
            "--samples",
            "6",
            "--trials",
            "5",
            "--cov-scale",
            "1.0",
            "--seed",
            "2",
        ]);
        c
    });
    assert!(study["fraction_twa_not_worse"].as_f64().unwrap() >= 0.0);
    assert_eq!(study["trials"].as_array().unwrap().len(), 5);

    let out_path = dir.path().join("bench.json");
    let output = twa()
        .args([
            "bench-extract",
            "--n",
            "4",
            "--dim",
            "64",
            "--repeats",
            "2",
            "--out",
            out_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(report["repeats"], 2);
    assert_eq!(report["extract_seconds"].as_array().unwrap().len(), 2);
}

#[test]
fn bad_arguments_fail_loudly() {
    let out = twa().args(["average", "--mode", "nonsense"]).output().unwrap();
    assert!(!out.status.success());

    let out = twa()
        .args(["eval", "--weights", "/nonexistent/file.twa1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing file") || err.contains("nonexistent"), "{err}");

    // averaging without checkpoints trains first, so force a bad config
    let out = twa().args(["train", "--split", "0.5,0.5"]).output().unwrap();
    assert!(!out.status.success());
}
