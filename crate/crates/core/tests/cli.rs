mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::tiny_config;

fn amde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amde"))
        .args(args)
        .output()
        .unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_succeeds() {
    let out = amde(&["gradcheck", "--cases", "3"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("lstm_encode") && !text.contains("FAIL"));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(3);
    let (config, data, run, csv) = (
        dir.path().join("cfg.json"),
        dir.path().join("data"),
        dir.path().join("run"),
        dir.path().join("metrics.csv"),
    );
    cfg.save(&config).unwrap();

    // gen-data has no shape flags, so the tiny dataset is exported directly.
    let ds = amde::data::IdentityDataset::generate(cfg.data.clone()).unwrap();
    amde::data::export_dataset(&ds, &data).unwrap();
    let out = amde(&[
        "gen-data",
        "--ids",
        "4",
        "--per-id",
        "4",
        "--out",
        arg(&dir.path().join("gen")),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = amde(&["train", "--config", arg(&config), "--out", arg(&run)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for file in ["checkpoint.amde", "train_log.json", "config.json"] {
        assert!(run.join(file).exists(), "{file}");
    }

    let ckpt = run.join("checkpoint.amde");
    let out = amde(&[
        "eval",
        "--checkpoint",
        arg(&ckpt),
        "--data",
        arg(&data),
        "--occlusion",
        "0,0.5",
        "--out",
        arg(&csv),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 3);
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.json");

    std::fs::write(&config, r#"{"epochs": 1, "learnig_rate": 0.1}"#).unwrap();
    let out = amde(&[
        "train",
        "--config",
        arg(&config),
        "--out",
        arg(&dir.path().join("run")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(6),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let missing = dir.path().join("absent.amde");
    let out = amde(&[
        "eval",
        "--checkpoint",
        arg(&missing),
        "--data",
        arg(dir.path()),
        "--out",
        arg(&config),
    ]);
    assert_eq!(out.status.code(), Some(11));

    let garbage = dir.path().join("garbage.amde");
    std::fs::write(&garbage, b"not a checkpoint at all").unwrap();
    let out = amde(&[
        "eval",
        "--checkpoint",
        arg(&garbage),
        "--data",
        arg(dir.path()),
        "--out",
        arg(&config),
    ]);
    assert_eq!(out.status.code(), Some(7));

    assert!(!amde(&["train"]).status.success());
}
