//! The `brainrgin` binary: help text, exit codes and a small end-to-end run.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_brainrgin");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Compares `brainrgin <sub> --help` with its golden file; `UPDATE_GOLDEN=1` rewrites it.
fn check_help(sub: Option<&str>) {
    let mut args: Vec<&str> = sub.into_iter().collect();
    args.push("--help");
    let out = run(&args);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let path = golden_dir().join(format!("{}.txt", sub.unwrap_or("brainrgin")));
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(golden_dir()).unwrap();
        std::fs::write(&path, &text).unwrap();
    }
    let expect = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden {}", path.display()));
    assert_eq!(text, expect, "help for {sub:?} changed");
}

#[test]
fn help_text_matches_golden_files() {
    check_help(None);
    for sub in ["synth", "build-graphs", "train", "evaluate", "interpret", "gradcheck"] {
        check_help(Some(sub));
    }
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = run(&["train", "--config", "definitely-missing.toml", "--out-dir", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nlayer_dimz = [1, 2, 3]\n").unwrap();
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let out = run(&["gradcheck", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("model_sero"));
    assert!(!table.contains("FAIL"));
}

pub const SMALL_CONFIG: &str = r#"
[model]
layer_dims = [8, 8, 8]
clusters_k = 3

[train]
epochs = 2
batch_size = 16
seeds = [0, 1]

[synth]
target_r2 = 0.6

[synth.generator]
n_subjects = 40
n_regions = 12
t_samples = 24

[synth.signal]
salient_rois = [1, 3, 5, 7]
"#;

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn synth_train_evaluate_interpret() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    let cfg = cfg.to_str().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    let (data_s, out_s) = (data.to_str().unwrap(), out.to_str().unwrap());

    let ok = |args: &[&str]| {
        let o = run(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    ok(&["synth", "--config", cfg, "--out-dir", data_s, "--seed", "3"]);
    assert!(data.join("labels.csv").is_file());
    assert!(data.join("subjects/sub-00039.csv").is_file());

    ok(&["build-graphs", "--config", cfg, "--data-dir", data_s, "--out-dir", data_s]);
    assert!(data.join("graphs.jsonl").is_file());

    ok(&["train", "--config", cfg, "--data-dir", data_s, "--out-dir", out_s]);
    for seed in [0, 1] {
        assert!(out.join(format!("seed-{seed}/checkpoint.json")).is_file());
        assert!(out.join(format!("seed-{seed}/history.csv")).is_file());
    }

    ok(&["evaluate", "--data-dir", data_s, "--out-dir", out_s]);
    let report: serde_json::Value = serde_json::from_slice(&read(&out.join("report.json"))).unwrap();
    assert!(report["mse"].is_number());
    assert!(report["pearson_corr"].is_number());
    assert_eq!(report["per_seed"].as_array().unwrap().len(), 2);

    ok(&["interpret", "--data-dir", data_s, "--out-dir", out_s, "--threshold", "0.5", "--emit-attention"]);
    let freq = String::from_utf8(read(&out.join("roi_freq.csv"))).unwrap();
    assert_eq!(freq.lines().count(), 13);
    let top: serde_json::Value = serde_json::from_slice(&read(&out.join("top_rois.json"))).unwrap();
    assert!(top.is_array() || top.is_object());
    assert!(out.join("seed-0/selections.jsonl").is_file());
    assert!(out.join("seed-1/roi_freq.csv").is_file());
}

#[test]
fn synth_is_reproducible_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    let make = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = run(&["synth", "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "--seed", seed]);
        assert!(o.status.success());
        out
    };
    let (a, b, c) = (make("a", "5"), make("b", "5"), make("c", "6"));
    for f in ["labels.csv", "subjects/sub-00000.csv", "subjects/sub-00017.csv", "signal.json"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    assert_ne!(read(&a.join("subjects/sub-00000.csv")), read(&c.join("subjects/sub-00000.csv")));
}
