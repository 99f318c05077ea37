//! End-to-end runs of the `eegmm` binary.

use std::path::Path;
use std::process::{Command, Output};

use eegmm::checkpoint::Checkpoint;

fn eegmm(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_eegmm")).args(args).env("RUST_LOG", "warn").output().expect("binary runs");
    out
}

fn ok(args: &[&str]) -> Output {
    let out = eegmm(args);
    assert!(out.status.success(), "eegmm {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let (data_s, run_s) = (p(&data), p(&run));

    ok(&["synth", "--out", &data_s, "--seed", "3", "--set", "n_subjects=4", "--set", "n_stimuli=2", "--set", "duration_s=60", "--set", "eeg_channels=8"]);
    ok(&["preprocess", "--data", &data_s]);
    ok(&["features", "--data", &data_s, "--set", r#"pca={"raw": 4}"#, "--set", "fold_defs=[]"]);
    let manifest = json(&data.join("manifest.json"));
    assert!(manifest["stimuli"][0]["features"]["raw_pca"].is_string());
    assert!(manifest["recordings"][0]["variants"]["multiband"].is_string());

    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"train": {"batch_size": 8, "n_negatives": 8, "eval_every_steps": 5, "max_steps": 10, "lr": 1e-3},
            "eeg": {"d_hidden": 8, "d_latent": 4}, "eeg_variant": "broadband", "features": ["raw_pca"], "fold_defs": []}"#,
    )
    .unwrap();
    ok(&["train", "--config", &p(&config), "--data", &data_s, "--out", &run_s, "--seed", "7"]);
    let trace = std::fs::read_to_string(run.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3, "{trace}");
    assert_eq!(json(&run.join("run.json"))["train"]["seed"], 7);
    let ck = Checkpoint::load(run.join("checkpoint.mmck")).unwrap();

    // re-evaluating the checkpoint reproduces its recorded validation accuracy
    let ck_s = p(&run.join("checkpoint.mmck"));
    let eval_out = dir.path().join("eval.json");
    ok(&["eval", "--checkpoint", &ck_s, "--data", &data_s, "--out", &p(&eval_out)]);
    let report = json(&eval_out);
    assert_eq!(report["accuracy"].as_f64().unwrap(), ck.best_val_accuracy);
    assert_eq!(report["per_set"].as_array().unwrap().len(), report["n"].as_u64().unwrap() as usize);

    // an ensemble of copies agrees with the single model; list files work too
    let out = ok(&["ensemble", "--checkpoints", &ck_s, &ck_s, &ck_s, "--data", &data_s]);
    let ens: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(ens["accuracy"], report["accuracy"]);
    assert_eq!(ens["members"].as_array().unwrap().len(), 3);
    let list = run.join("members.json");
    std::fs::write(&list, r#"["checkpoint.mmck", "checkpoint.mmck"]"#).unwrap();
    let out = ok(&["ensemble", "--checkpoints", &p(&list), "--data", &data_s]);
    let ens2: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(ens2["accuracy"], report["accuracy"]);

    // checkpoints carry their own config
    let out = eegmm(&["eval", "--checkpoint", &ck_s, "--data", &data_s, "--config", &p(&config)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn untrained_model_is_at_chance_on_noise() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("noise");
    let data_s = data.to_str().unwrap();
    ok(&["synth", "--out", data_s, "--set", "noise_sigma=\"inf\"", "--set", "duration_s=900", "--set", "eeg_channels=16"]);
    let out = ok(&[
        "eval", "--untrained", "--data", data_s, "--set", "eeg_variant=raw", "--set", r#"features=["synth"]"#, "--set", "fold_defs=[]",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let n = report["n"].as_u64().unwrap() as f64;
    let acc = report["accuracy"].as_f64().unwrap();
    assert!(n >= 1000.0, "{n} sets");
    let half_width = 2.5758 * (0.2 * 0.8 / n).sqrt();
    assert!((acc - 0.2).abs() <= half_width, "accuracy {acc} outside 0.2 +- {half_width}");
}

#[test]
fn usage_and_input_errors() {
    assert_eq!(eegmm(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(eegmm(&["eval", "--data", "x"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.mmck");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    let out = eegmm(&["eval", "--checkpoint", bogus.to_str().unwrap(), "--data", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = eegmm(&["synth", "--out", dir.path().join("s").to_str().unwrap(), "--set", "noise_sigma=\"lots\""]);
    assert_eq!(out.status.code(), Some(1));
}
