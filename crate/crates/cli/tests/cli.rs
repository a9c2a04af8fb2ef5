use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn grok(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grok"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy_config(dir: &Path, lr: f64, norm: &str, max_epochs: u64) -> String {
    let unembed = if norm == "spherical" {
        r#"{"kind": "bounded_cosine", "tau": 10.0}"#
    } else {
        r#"{"kind": "standard"}"#
    };
    let text = format!(
        r#"{{
  "name": "toy",
  "task": {{"kind": "mod_add", "p": 7}},
  "model": {{"vocab_size": 8, "seq_len": 3, "d_model": 16, "n_heads": 2, "d_head": 8, "d_mlp": 32,
            "norm_mode": "{norm}", "unembed_mode": {unembed}, "attention_mode": "learned",
            "fourier_init": false, "fourier_freqs": [1], "init_seed": 0}},
  "train": {{"learning_rate": {lr:e}, "weight_decay": 0.0, "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8,
            "max_epochs": {max_epochs}, "eval_every": 5, "grok_threshold": 0.99, "train_seed": 0}},
  "seeds": [0]
}}"#
    );
    let path = dir.join(format!("toy-{norm}-{max_epochs}.json"));
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&grok(&["run"])), 1);
    assert_eq!(code(&grok(&["frobnicate"])), 1);
    assert_eq!(code(&grok(&["run", "--preset", "no-such-preset"])), 1);
    assert_eq!(code(&grok(&["--help"])), 0);
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"preset": "zp-sphere-wd0-lr1e-4", "overrides": {"max_epochs": "lots"}}"#).unwrap();
    let o = grok(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("overrides.max_epochs"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_is_an_io_error() {
    assert_eq!(code(&grok(&["run", "--config", "/nonexistent/config.json"])), 3);
}

#[test]
fn run_writes_outputs_and_refuses_to_clobber() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), 1e-3, "spherical", 10);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let o = grok(&["run", "--config", &cfg, "--out", out_s]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["config.json", "metrics.csv", "summary.json", "checkpoint_final.bin"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let s = read_json(&out.join("summary.json"));
    for key in ["config", "grok_epoch", "peak_test_acc", "diverged", "wall_time_seconds"] {
        assert!(s.get(key).is_some(), "{key}");
    }
    assert_eq!(s["diverged"], false);

    let again = grok(&["run", "--config", &cfg, "--out", out_s]);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("--force"));
    assert_eq!(code(&grok(&["run", "--config", &cfg, "--out", out_s, "--force"])), 0);
}

#[test]
fn f64_runs_are_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), 1e-3, "layer_norm", 12);
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = grok(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--f64", "--seeds", "5"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        csvs.push(fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn zero_epoch_preset_reports_initial_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"preset": "zp-sphere-wd0-lr1e-4", "overrides": {"max_epochs": 0}}"#).unwrap();
    let out = dir.path().join("run");
    let o = grok(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let s = read_json(&out.join("summary.json"));
    assert_eq!(s["final_metrics"]["epoch"], 0);
    assert!(s["grok_epoch"].is_null());

    // An untrained checkpoint still analyses, flagged as not grokked.
    let o = grok(&["analyze", "--run", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_json(&out.join("spectral_report.json"));
    assert_eq!(report["grokked"], false);
    assert_eq!(report["spectrum"].as_array().unwrap().len(), 57);
    assert!(out.join("spectrum.csv").is_file());
    assert_eq!(code(&grok(&["analyze", "--run", out.to_str().unwrap()])), 1);
}

#[test]
fn divergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), 1e30, "layer_norm", 50);
    let out = dir.path().join("run");
    let o = grok(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert_eq!(read_json(&out.join("summary.json"))["diverged"], true);
}

#[test]
fn sweep_reports_zero_std_for_one_seed_and_matches_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), 3e-3, "spherical", 300);
    let out = dir.path().join("sweep");
    let o = grok(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--seeds", "2", "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let agg = read_json(&out.join("aggregate.json"));
    assert_eq!(agg["aggregate"]["runs"], 1);
    let s = read_json(&out.join("seed-2").join("summary.json"));
    if s["grok_epoch"].is_null() {
        assert_eq!(agg["aggregate"]["failures"], 1);
        assert!(agg["aggregate"]["std_grok_epoch"].is_null());
    } else {
        assert_eq!(agg["aggregate"]["std_grok_epoch"], 0.0);
        assert_eq!(agg["aggregate"]["mean_grok_epoch"].as_f64(), s["grok_epoch"].as_f64());
    }
    assert_eq!(agg["aggregate"]["max_peak_acc"], s["peak_test_acc"]);
    let table = fs::read_to_string(out.join("table.md")).unwrap();
    assert!(table.starts_with("| Architecture | Mean Grok Epoch |"));
}

#[test]
fn sweep_runs_every_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), 1e-3, "rms_norm", 5);
    let out = dir.path().join("sweep");
    let o = grok(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--seeds", "0,1,2", "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for s in 0..3 {
        assert!(out.join(format!("seed-{s}")).join("summary.json").is_file());
    }
    assert_eq!(read_json(&out.join("aggregate.json"))["aggregate"]["runs"], 3);
}

#[test]
fn analyze_rejects_s5_and_missing_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s5.json");
    fs::write(&cfg, r#"{"preset": "s5-sphere-wd1"}"#).unwrap();
    let ckpt = dir.path().join("none.bin");
    let o = grok(&["analyze", "--config", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("S5") || stderr(&o).contains("s5") || stderr(&o).contains("unsupported"), "{}", stderr(&o));

    let zp = dir.path().join("zp.json");
    fs::write(&zp, r#"{"preset": "zp-sphere-wd1-lr1e-4"}"#).unwrap();
    let o = grok(&["analyze", "--config", zp.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn plot_emits_labelled_deterministic_svgs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), 1e-3, "spherical", 20);
    let mut runs = Vec::new();
    for seed in ["0", "1"] {
        let out = dir.path().join(format!("run{seed}"));
        assert_eq!(code(&grok(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--seeds", seed])), 0);
        runs.push(out.to_str().unwrap().to_string());
    }
    let mut outputs = Vec::new();
    for name in ["p1", "p2"] {
        let out = dir.path().join(name);
        let o = grok(&["plot", &runs[0], &runs[1], "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        outputs.push(out);
    }
    for f in ["test_accuracy_full.svg", "test_accuracy_early.svg", "combined_metrics.csv"] {
        let a = fs::read(outputs[0].join(f)).unwrap();
        assert_eq!(a, fs::read(outputs[1].join(f)).unwrap(), "{f}");
    }
    let svg = fs::read_to_string(outputs[0].join("test_accuracy_full.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains(r#"data-label="toy seed 0""#) && svg.contains(r#"data-label="toy seed 1""#));
}

#[test]
fn dump_dataset_writes_every_pair() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("zp.csv");
    let o = grok(&["dump-dataset", "--preset", "zp-baseline-ln-lr1e-4", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1 + 113 * 113);
    assert_eq!(text.lines().filter(|l| l.ends_with(",train")).count(), 3830);
    assert!(text.lines().any(|l| l.starts_with("112,5,4,")));
    let again = grok(&["dump-dataset", "--preset", "zp-baseline-ln-lr1e-4", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&again), 1);
}
