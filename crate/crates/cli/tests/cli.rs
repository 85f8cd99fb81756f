use std::path::Path;
use std::process::{Command, Output};

fn haicomm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_haicomm")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "schema_version": 1,
        "experiment": "cli-smoke",
        "data": { "n_pretrain": 24, "n_train": 16, "n_val": 4, "n_test": 10, "min_pretrain_ratio": 1.0 },
        "pretrain": { "epochs": 2 },
        "consensus": { "classifier": { "folds": 2, "train": { "max_epochs": 2 } } },
        "fusion": { "max_epochs": 2, "warmup_epochs": 1.0 },
        "metrics": { "n_bootstrap": 20 }
    });
    let p = dir.join("tiny.json");
    std::fs::write(&p, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    p
}

#[test]
fn help_lists_every_subcommand() {
    let out = haicomm(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["gen-data", "prep", "pretrain", "consensus", "train", "predict", "evaluate", "ablate", "pipeline"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seeed": 3}"#).unwrap();
    let out = haicomm(&["--config", bad.to_str().unwrap(), "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seeed"));

    let out = haicomm(&["--config", dir.path().join("missing.json").to_str().unwrap(), "gen-data"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(haicomm(&["--threads", "0", "gen-data"]).status.code(), Some(2));
}

#[test]
fn missing_upstream_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = haicomm(&["--out", dir.path().to_str().unwrap(), "evaluate"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("evaluate"));
}

#[test]
fn stages_run_individually_and_predict_emits_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let base = ["--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap(), "--seed", "7", "--threads", "1"];
    for stage in ["gen-data", "prep", "pretrain", "consensus", "train", "evaluate"] {
        let out = haicomm(&[&base[..], &[stage]].concat());
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(run.join("evaluate/metrics.json").is_file());

    let out = haicomm(&[&base[..], &["predict", "--split", "test"]].concat());
    assert!(out.status.success());
    let preds: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let preds = preds.as_array().unwrap();
    assert_eq!(preds.len(), 10);
    assert!(preds.iter().all(|p| (0.0..=1.0).contains(&p["p_pos"].as_f64().unwrap())));

    let out = haicomm(&[&base[..], &["pipeline", "--no-ablate"]].concat());
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("up to date"));
}
