use std::path::Path;
use std::process::{Command, Output};

use mtgate::config::{DatasetConfig, ExperimentConfig};
use mtgate::data::{generate, Dataset, SynthSpec};

fn mtgate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtgate"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset = DatasetConfig::Synthetic(SynthSpec {
        n_train: 120,
        n_val: 48,
        n_test: 48,
        dim: 6,
        coarse_classes: 2,
        fine_per_coarse: 2,
        ..SynthSpec::default()
    });
    cfg.backbone.width = 8;
    cfg.backbone.blocks = 4;
    cfg.backbone.gated_tail = 2;
    cfg.backbone.pinned_head = 1;
    cfg.train.warm_up_epochs = 1;
    cfg.train.max_epochs = 3;
    cfg.train.retrain_epochs = 1;
    cfg.train.baseline_epochs = 1;
    cfg.train.num_sampled_plans = 2;
    cfg.target_rates = vec![0.8];
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

#[test]
fn bad_config_exits_with_2_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"train": {"warm_up_epochs": 5, "max_epochs": 2}}"#).unwrap();
    let out_dir = dir.path().join("out");
    let o = mtgate(&["sweep", "--config", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out_dir.exists());

    std::fs::write(&path, r#"{"seed": 1, "colour": "blue"}"#).unwrap();
    let o = mtgate(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = mtgate(&["sweep", "--target-rates", "0.5,1.5"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mtgate(&["gen-data", "--preset", "cityscapes"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_artifacts_exit_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let o = mtgate(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("summary.json") && stderr.contains("cost.csv"), "{stderr}");

    let cfg = tiny_config(dir.path());
    let o = mtgate(&["retrain", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train_state.json"));
}

#[test]
fn gen_data_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = mtgate(&["gen-data", "--config", cfg.to_str().unwrap(), "--seed", "5", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let loaded = Dataset::load_csv(&dir.path().join("data.csv")).unwrap();
    let parsed = ExperimentConfig::load(&cfg).unwrap();
    let DatasetConfig::Synthetic(spec) = parsed.dataset else { unreachable!() };
    assert_eq!(loaded, generate(&spec, 5).unwrap());
    assert!(dir.path().join("data_spec.json").exists());
}

#[test]
fn sweep_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    let r = mtgate(&["sweep", "--config", c, "--out", o]);
    assert_eq!(r.status.code(), Some(4), "sweep without a reference should ask for one");
    let r = mtgate(&["sweep", "--config", c, "--out", o, "--compute-reference"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("t=0.8"));
    let r = mtgate(&["report", "--out", o]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("report.json").exists() && out.join("report.csv").exists());
    let model = out.join("model_t0.8.json");
    let r = mtgate(&["evaluate", "--config", c, "--out", o, "--model", model.to_str().unwrap(), "--split", "test"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let v: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    assert!(v["delta"].is_number());
}
