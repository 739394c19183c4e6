use std::path::Path;
use std::process::{Command, Output};

use tcinet::cli::{ExperimentConfig, RunManifest};
use tcinet::pom::Balancing;

fn tcinet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcinet"))
        .args(args)
        .env("TCINET_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn small_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        data: tcinet::cli::DataSource::Synthetic {
            n_steps: 260,
            burn_in: 50,
            noise_std: 1.0,
        },
        variants: vec![Balancing::None, Balancing::GmmSw],
        fixed_contrast: true,
        seeds: vec![3],
        output_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.eval.pom.lag = 3;
    cfg.eval.pom.lstm_widths = vec![4, 4, 2];
    cfg.eval.pom.dense_widths = vec![4, 2, 1];
    cfg.eval.pom.max_epochs = 2;
    cfg.eval.mc.n_mc = 4;
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(tcinet(&["--help"]).status.code(), Some(0));
    assert_eq!(tcinet(&["--version"]).status.code(), Some(0));
}

#[test]
fn unknown_flag_is_a_validation_error() {
    assert_eq!(tcinet(&["synth", "--bogus"]).status.code(), Some(1));
}

#[test]
fn synth_writes_three_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = tcinet(&["synth", "--n", "120", "--seed", "4", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["factual.csv", "counterfactual.csv", "truth.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn missing_column_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    assert!(tcinet(&["synth", "--n", "120", "--out", out.to_str().unwrap()]).status.success());
    let data = out.join("factual.csv");
    let o = tcinet(&[
        "weights",
        "--data",
        data.to_str().unwrap(),
        "--treatment",
        "nope",
        "--out",
        dir.path().join("w.csv").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bad_intervention_exits_one() {
    let o = tcinet(&["synth", "--intervention", "scale:-1", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unwritable_output_exits_two_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out = blocker.join("sub");
    let o = tcinet(&["synth", "--n", "120", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn weights_train_infer_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("s");
    assert!(tcinet(&["synth", "--n", "200", "--seed", "1", "--out", s.to_str().unwrap()]).status.success());
    let data = s.join("factual.csv");
    let data = data.to_str().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.data = tcinet::cli::DataSource::Csv {
        path: data.into(),
        schema: tcinet::timeseries::ColumnSchema {
            treatment: "S3".into(),
            outcome: "S4".into(),
            covariates: vec!["S1".into(), "S2".into()],
        },
    };
    cfg.fixed_contrast = false;
    let config = write_config(dir.path(), &cfg);

    let w = dir.path().join("w.csv");
    let o = tcinet(&["weights", "--config", &config, "--method", "iptw", "--out", w.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let n = std::fs::read_to_string(&w).unwrap().lines().count();
    assert_eq!(n, 1 + 200 - 3 + 1);

    let model = dir.path().join("m");
    let o = tcinet(&["train", "--config", &config, "--out", model.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(model.join("checkpoint.json").is_file());
    assert!(model.join("history.csv").is_file());

    let inf = dir.path().join("i");
    let o = tcinet(&[
        "infer",
        "--config",
        &config,
        "--checkpoint",
        model.join("checkpoint.json").to_str().unwrap(),
        "--intervention",
        "mean_replace",
        "--intervention",
        "trend:0.039x2",
        "--plot-data",
        "--out",
        inf.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["effect-0.json", "effect-1.json", "predictions-1.csv", "plot-0.csv"] {
        assert!(inf.join(f).is_file(), "{f}");
    }
}

#[test]
fn evaluate_writes_results_with_median_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir.path().join("unused"));
    let config = write_config(dir.path(), &cfg);
    let out = dir.path().join("eval");
    let o = tcinet(&["evaluate", "--config", &config, "--seeds", "1..2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("results.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    // 2 seeds x 2 variants x 2 settings, then 4 median rows
    assert_eq!(rows.len(), 8 + 4);
    assert_eq!(rows.iter().filter(|r| r.starts_with("median,")).count(), 4);
}

#[test]
fn run_records_manifest_that_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = small_config(&out);
    let config = write_config(dir.path(), &cfg);
    let o = tcinet(&["run", "--config", &config]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = RunManifest::load(&out).unwrap();
    assert_eq!(manifest.status, "complete");
    assert!(manifest.files.iter().any(|f| f.path == "aggregate.csv"));
    assert!(manifest.files.iter().any(|f| f.path == "seed-3/gmm_sw/checkpoint.json"));
    assert!(manifest.verify(&out).unwrap().is_empty());
    for stage in ["data", "train", "infer", "evaluate", "aggregate"] {
        assert!(manifest.stages.iter().any(|s| s.stage == stage), "{stage}");
    }
}
