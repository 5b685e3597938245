//! End-to-end tests of the binary: exit codes and the train -> eval -> diagnose
//! artifact round trip on a tiny synthetic run.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metagsnr"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn metagsnr")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const TINY_CONFIG: &str = r#"
target_domain = 0
seed = 0
mode = "dropout"
criterion = "gsnr"
epochs = 2
batch_size = 8
lr = 0.05

[dataset]
source = "synthetic"

[dataset.data]
image_hw = 8
channels = 1
num_classes = 3
num_domains = 2
samples_per_class = 4
seed = 0
style_strength = 0.5
noise_sigma = 0.05

[dataset.data.shortcut]
mode = "patch"
strength = 0.5
permute_per_domain = true

[net]
input_hw = 8
in_channels = 1
widths = [2, 4]
num_classes = 3
"#;

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("train"));
}

#[test]
fn unknown_flag_is_a_config_error() {
    let out = run(&["train", "--no-such-flag"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn invalid_field_value_is_a_config_error() {
    let out = run(&["train", "--p-gsnr", "1.5"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let out = run(&["eval", "--checkpoint", "/nonexistent/checkpoint.json"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_bench_manifest_is_a_config_error() {
    let out = run(&["bench", "run", "/nonexistent/manifest.toml"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn train_eval_diagnose_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, TINY_CONFIG).unwrap();
    let out_dir = dir.path().join("out");

    let out = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    for artifact in ["metrics.jsonl", "checkpoint.json", "config.toml"] {
        assert!(
            Path::new(&out_dir).join(artifact).exists(),
            "missing {artifact}"
        );
    }

    let ckpt = out_dir.join("checkpoint.json");
    let out = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--domain", "0"]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("eval prints JSON");
    assert!(report["overall"].as_f64().unwrap() >= 0.0);

    let diag_dir = dir.path().join("diag");
    let out = run(&[
        "diagnose",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--output-dir",
        diag_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(diag_dir.join("metrics.jsonl").exists());
}

#[test]
fn sweep_p_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, TINY_CONFIG).unwrap();
    let out_dir = dir.path().join("sweep");
    let out = run(&[
        "sweep-p",
        "--config",
        cfg_path.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
        "--grid",
        "0.2;0.5",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("sweep_p.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn malformed_grid_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, TINY_CONFIG).unwrap();
    let out = run(&[
        "sweep-p",
        "--config",
        cfg_path.to_str().unwrap(),
        "--grid",
        "0.2;bogus",
    ]);
    assert_eq!(code(&out), 1);
}
