//! End-to-end tests of the `frnet` binary.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_frnet");

const CONFIG: &str = r#"{
  "network": {
    "electrodes": 3, "trial_length": 32, "classes": 2,
    "stem_filters": 2, "stem_temporal_kernel": 8, "stem_depth_multiplier": 1,
    "stem_pool": 8, "mfe_branch_kernels": [3], "mfe_filters_per_branch": 2,
    "fr_channels": 8, "temporal_scale_factor": 2, "scale_base": 2,
    "channel_split_factor": 1, "prediction_kernel": 4, "dropout_p": 0.0
  },
  "train": { "epochs": 6, "batch_size": 8, "learning_rate": 0.005, "folds": 2 },
  "synth": {
    "classes": 2, "trials_per_class": 10, "channels": 3, "samples": 32,
    "sampling_rate": 32.0, "class_frequencies": [3.0, 8.0],
    "class_channels": [[0], [2]], "window": [8, 24],
    "amplitude": 1.5, "noise_sigma": 0.2, "seed": 5
  }
}"#;

fn frnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .args(args)
        .output()
        .expect("failed to launch frnet")
}

fn run_ok(dir: &Path, args: &[&str]) {
    let out = frnet(dir, args);
    assert!(
        out.status.success(),
        "frnet {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("c.json"), CONFIG).unwrap();
        Workspace { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }
}

#[test]
fn synth_train_eval_pipeline() {
    let ws = Workspace::new();
    run_ok(ws.path(), &["--config", "c.json", "--out", "o", "synth"]);
    assert!(ws.path().join("o/synth.eegb").exists());

    run_ok(
        ws.path(),
        &["--config", "c.json", "--out", "o", "train", "--data", "o/synth.eegb"],
    );
    assert!(ws.path().join("o/model.frwt").exists());
    assert!(ws.path().join("o/model.json").exists());
    let history = std::fs::read_to_string(ws.path().join("o/history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,val_loss,val_acc,lr"));
    assert_eq!(lines.count(), 6, "one row per epoch");

    run_ok(
        ws.path(),
        &[
            "--config", "c.json", "--out", "o", "eval", "--data", "o/synth.eegb", "--model",
            "o/model.frwt",
        ],
    );
    let report = std::fs::read_to_string(ws.path().join("o/eval.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(json["accuracy"].is_number());
    assert!(ws.path().join("o/confusion.csv").exists());
    assert!(ws.path().join("o/roc_class0.csv").exists());
}

#[test]
fn xval_writes_fold_reports_and_is_deterministic() {
    let ws = Workspace::new();
    run_ok(ws.path(), &["--config", "c.json", "--out", "o", "synth"]);
    run_ok(
        ws.path(),
        &["--config", "c.json", "--out", "r1", "xval", "--data", "o/synth.eegb"],
    );
    for f in ["fold0.json", "fold1.json", "aggregate.json", "fold0.frwt"] {
        assert!(ws.path().join("r1").join(f).exists(), "{f} missing");
    }

    // second run, different directory and parallel folds: byte-identical
    run_ok(
        ws.path(),
        &[
            "--config", "c.json", "--out", "r2", "xval", "--data", "o/synth.eegb", "--jobs",
            "2",
        ],
    );
    for f in [
        "fold0.json",
        "fold1.json",
        "aggregate.json",
        "fold0.frwt",
        "fold1.frwt",
        "fold0_history.csv",
    ] {
        let a = std::fs::read(ws.path().join("r1").join(f)).unwrap();
        let b = std::fs::read(ws.path().join("r2").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between runs");
    }
}

#[test]
fn explain_emits_attribution_csv() {
    let ws = Workspace::new();
    run_ok(ws.path(), &["--config", "c.json", "--out", "o", "synth"]);
    run_ok(
        ws.path(),
        &["--config", "c.json", "--out", "o", "train", "--data", "o/synth.eegb"],
    );
    run_ok(
        ws.path(),
        &[
            "--config", "c.json", "--out", "o", "explain", "--data", "o/synth.eegb",
            "--model", "o/model.frwt", "--trial", "0", "--class", "1", "--layer", "fr",
        ],
    );
    let csv = std::fs::read_to_string(ws.path().join("o/gradcam_trial0_class1.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("time_index,activation"));
    assert_eq!(lines.count(), 8, "one row per pooled time step");
}

#[test]
fn gradcheck_exits_zero_and_prints_a_table() {
    let ws = Workspace::new();
    let out = frnet(ws.path(), &["gradcheck", "--seed", "7"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for op in ["conv2d", "batch_norm", "pair_softmax", "full_network"] {
        assert!(text.contains(op), "missing row for {op}");
    }
    assert!(!text.contains("FAIL"));
}

#[test]
fn invalid_config_names_the_offending_key() {
    let ws = Workspace::new();
    std::fs::write(ws.path().join("bad.json"), r#"{"train": {"learning_rte": 1}}"#).unwrap();
    let out = frnet(ws.path(), &["--config", "bad.json", "synth"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rte"), "stderr: {err}");
}

#[test]
fn unknown_ablation_fails() {
    let ws = Workspace::new();
    run_ok(ws.path(), &["--config", "c.json", "--out", "o", "synth"]);
    let out = frnet(
        ws.path(),
        &[
            "--config", "c.json", "--out", "o", "train", "--data", "o/synth.eegb",
            "--ablation", "bogus",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn seed_flag_overrides_config() {
    let ws = Workspace::new();
    run_ok(
        ws.path(),
        &["--config", "c.json", "--out", "a", "--seed", "11", "synth"],
    );
    run_ok(
        ws.path(),
        &["--config", "c.json", "--out", "b", "--seed", "12", "synth"],
    );
    run_ok(
        ws.path(),
        &["--config", "c.json", "--out", "c", "--seed", "11", "synth"],
    );
    let a = std::fs::read(ws.path().join("a/synth.eegb")).unwrap();
    let b = std::fs::read(ws.path().join("b/synth.eegb")).unwrap();
    let c = std::fs::read(ws.path().join("c/synth.eegb")).unwrap();
    assert_eq!(a, c, "same seed must reproduce the data");
    assert_ne!(a, b, "different seeds must differ");
}
