//! Command-line behavior of the `dvsa` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn dvsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dvsa"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dvsa(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small noisy dataset and a config file under a fresh directory.
fn fixture(config: &str) -> (TempDir, PathBuf, PathBuf) {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "gen-data",
        "--out",
        s(&data),
        "--seed",
        "4",
        "--noise-q",
        "0.1",
        "--classes",
        "10",
        "--attributes",
        "16",
        "--visual-dim",
        "24",
        "--regions",
        "4",
        "--embed-dim",
        "8",
        "--n-per-class",
        "12",
        "--val-per-class",
        "6",
        "--test-per-class",
        "6",
    ]);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, config).unwrap();
    (dir, data, cfg)
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn missing_config_exits_one_and_names_the_path() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.cfg");
    let out = dvsa(&["train", "--config", s(&missing), "--data", s(dir.path()), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.cfg"));
}

#[test]
fn unknown_flag_exits_one() {
    assert_eq!(dvsa(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(dvsa(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_value_exits_one() {
    let (dir, data, cfg) = fixture("epochs = 2\nlr = -1\n");
    let out = dvsa(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn divergent_run_exits_two() {
    let (dir, data, cfg) = fixture("epochs = 5\nlr = 1e12\n");
    let out = dvsa(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn micro_run_writes_history_and_is_reproducible() {
    let (dir, data, cfg) = fixture("epochs = 2\nseed = 3\n");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(out)]);
    }
    let history = read(&a.join("history.csv"));
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,"));
    assert_eq!(read(&a.join("metrics.csv")), read(&b.join("metrics.csv")));
    assert!(a.join("checkpoint.bin").exists() && a.join("manifest.txt").exists());
}

#[test]
fn stop_and_resume_matches_straight_run() {
    let (dir, data, cfg) = fixture("epochs = 5\nseed = 8\n");
    let straight = dir.path().join("straight");
    let split = dir.path().join("split");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&straight)]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&split), "--stop-after", "2"]);
    assert!(!split.join("metrics.csv").exists());
    ok(&["train", "--resume", "--data", s(&data), "--out", s(&split)]);
    for f in ["checkpoint.bin", "history.csv", "metrics.csv"] {
        assert_eq!(fs::read(straight.join(f)).unwrap(), fs::read(split.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn sweep_agrees_with_eval_and_is_monotone() {
    let (dir, data, cfg) = fixture("epochs = 3\nseed = 1\nuse_mi = false\n");
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    let ckpt = run.join("checkpoint.bin");

    let sweep0 = dir.path().join("sweep0");
    ok(&["sweep-gamma", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&sweep0), "--grid", "0", "--split", "test"]);
    let eval0 = dir.path().join("eval0");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&eval0), "--gamma", "0"]);
    let sweep_row: Vec<f64> = read(&sweep0.join("sweep.csv")).lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let eval_row: Vec<String> = read(&eval0.join("metrics.csv")).lines().nth(1).unwrap().split(',').map(String::from).collect();
    // sweep: gamma,T1,U,S,H   metrics: T1,U,S,H,gamma
    for k in 0..4 {
        assert_eq!(sweep_row[k + 1], eval_row[k].parse::<f64>().unwrap());
    }

    let full = dir.path().join("sweep");
    ok(&["sweep-gamma", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&full)]);
    let rows: Vec<Vec<f64>> = read(&full.join("sweep.csv"))
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 11);
    assert!(rows.windows(2).all(|w| w[1][5] <= w[0][5]));
}

#[test]
fn ablate_writes_all_rows_in_order() {
    let (dir, data, cfg) = fixture("epochs = 20\nseed = 2\n");
    let out = dir.path().join("ablate");
    ok(&["ablate", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--calibrate"]);
    let csv = read(&out.join("ablation.csv"));
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let names = ["plain-ce", "vta", "vta+vis", "vta+vis+sem", "vta+vis+sem+ami", "vta+vis+sem+omega", "full"];
    assert_eq!(rows.len(), names.len());
    for (i, (row, name)) in rows.iter().zip(names).enumerate() {
        assert_eq!(row[0], (i + 1).to_string());
        assert_eq!(row[1], name);
    }
    let h = |r: &[&str]| r[10].parse::<f64>().unwrap();
    assert!(h(&rows[6]) >= h(&rows[0]), "full {} < plain {}", h(&rows[6]), h(&rows[0]));
}

#[test]
fn dumps_soft_labels_and_attention() {
    let (dir, data, cfg) = fixture("epochs = 1\n");
    let out = dir.path().join("r");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--dump-soft-labels", "--dump-attention", "2"]);
    let labels = read(&out.join("softlabels.csv"));
    assert!(labels.starts_with("instance,true_label,argmax,"));
    for f in ["vta_0.csv", "atv_0.csv", "vta_1.csv", "atv_1.csv"] {
        assert!(out.join("attn").join(f).exists(), "{f}");
    }
}

#[test]
fn grad_check_passes() {
    let stdout = ok(&["grad-check"]);
    assert!(stdout.contains("max rel error"));
}
