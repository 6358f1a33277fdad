use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: [&str; 7] = [
    "model.base_channels=8",
    "model.depth=2",
    "model.heads=2",
    "model.neighborhood_window=3",
    "model.embed_dim=16",
    "train.batch_size=2",
    "eval.batch_size=2",
];

fn run(args: &[&str]) -> Output {
    run_env(args, None)
}

fn run_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_saderkit"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("SADERKIT_SEED");
    if let Some(s) = seed {
        cmd.env("SADERKIT_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn with_tiny<'a>(mut args: Vec<&'a str>) -> Vec<&'a str> {
    for t in TINY {
        args.push("--set");
        args.push(t);
    }
    args
}

fn synth(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["synth", "--out", p(&out), "--n", "4", "--size", "16", "--seed", "3"];
    args.extend_from_slice(extra);
    ok(&run(&args));
    out
}

fn train(dir: &Path, data: &Path, extra: &[&str]) -> PathBuf {
    let runs = dir.join("runs");
    let mut args = with_tiny(vec!["train", "--data", p(data), "--run-dir", p(&runs), "--name", "tiny", "--epochs", "1"]);
    args.extend_from_slice(extra);
    ok(&run(&args));
    runs.join("tiny")
}

#[test]
fn synth_is_deterministic_and_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", &[]);
    let b = synth(dir.path(), "b", &[]);
    let manifest = fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(manifest, fs::read(b.join("manifest.json")).unwrap());
    assert_eq!(fs::read(a.join("s00000/target.f32")).unwrap(), fs::read(b.join("s00000/target.f32")).unwrap());
    let m: Value = serde_json::from_slice(&manifest).unwrap();
    assert_eq!(m["ids"].as_array().unwrap().len(), 4);
    for id in m["ids"].as_array().unwrap() {
        assert!(a.join(id.as_str().unwrap()).join("meta.json").exists());
    }
    let cfg: Value = serde_json::from_str(&fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["data"]["synth"]["n"], 4);
    assert!(cfg["sampler"]["steps"].is_number(), "defaults are materialized");

    let again = run(&["synth", "--out", p(&a), "--n", "4", "--size", "16"]);
    assert_eq!(again.status.code(), Some(2));
    ok(&run(&["synth", "--out", p(&a), "--n", "2", "--size", "16", "--force"]));
}

#[test]
fn synth_records_requested_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cov");
    ok(&run(&["synth", "--out", p(&out), "--n", "20", "--size", "32", "--coverage", "0.4", "--seed", "1"]));
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let cov = m["mean_coverage"].as_f64().unwrap();
    assert!((0.3..=0.5).contains(&cov), "{cov}");
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let flag = dir.path().join("flag");
    let env = dir.path().join("env");
    let other = dir.path().join("other");
    ok(&run(&["synth", "--out", p(&flag), "--n", "1", "--size", "16", "--seed", "7"]));
    ok(&run_env(&["synth", "--out", p(&env), "--n", "1", "--size", "16"], Some("7")));
    ok(&run_env(&["synth", "--out", p(&other), "--n", "1", "--size", "16", "--seed", "8"], Some("7")));
    let t = |d: &Path| fs::read(d.join("s00000/target.f32")).unwrap();
    assert_eq!(t(&flag), t(&env));
    assert_ne!(t(&flag), t(&other));
    assert_eq!(run_env(&["synth", "--out", p(&dir.path().join("x")), "--n", "1"], Some("seven")).status.code(), Some(2));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(&dir.path().join("x")).to_string();
    assert_eq!(run(&["synth", "--out", &out, "--set", "data.synth.bogus=1"]).status.code(), Some(2));
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"sampler": {"unknown": 1}}"#).unwrap();
    assert_eq!(run(&["synth", "--out", &out, "--config", p(&cfg)]).status.code(), Some(2));
    assert_eq!(run(&["sample", "--bogus-flag"]).status.code(), Some(2));
}

#[test]
fn train_sample_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", &[]);
    let run_dir = train(dir.path(), &data, &[]);
    for f in ["config.json", "train.jsonl", "ckpt-1"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let rec: Value = serde_json::from_str(fs::read_to_string(run_dir.join("train.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert!(rec["total"].is_number());
    let cfg: Value = serde_json::from_str(&fs::read_to_string(run_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["model"]["base_channels"], 8);

    let ckpt = run_dir.join("ckpt-1");
    let pred = dir.path().join("pred");
    ok(&run(&[
        "sample", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&pred), "--steps", "2", "--resample", "1", "--guide", "conv",
        "--th", "0.3", "--seed", "5", "--jobs", "2",
    ]));
    let scene = pred.join("s00000");
    for f in ["pred.f32", "pred.png", "trace.json"] {
        assert!(scene.join(f).exists(), "{f}");
    }
    assert_eq!(fs::metadata(scene.join("pred.f32")).unwrap().len(), 3 * 16 * 16 * 4);
    let trace: Value = serde_json::from_str(&fs::read_to_string(scene.join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace["levels"].as_array().unwrap().len(), 2);
    assert!(trace["levels"][0]["rounds"][0]["replacement_rate"].is_number());
    let used: Value = serde_json::from_str(&fs::read_to_string(pred.join("config.json")).unwrap()).unwrap();
    assert_eq!(used["sampler"]["steps"], 2);
    assert_eq!(used["sampler"]["threshold"], 0.3);
    let pred_default = dir.path().join("pred_default");
    ok(&run(&["sample", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&pred_default), "--steps", "2", "--guide", "conv"]));
    let used: Value = serde_json::from_str(&fs::read_to_string(pred_default.join("config.json")).unwrap()).unwrap();
    let m: Value = serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let th = used["sampler"]["threshold"].as_f64().unwrap();
    assert!((th - m["mean_coverage"].as_f64().unwrap()).abs() < 1e-6, "threshold defaults to mean coverage");

    // a second run with the same flags writes identical predictions
    let pred2 = dir.path().join("pred2");
    ok(&run(&[
        "sample", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&pred2), "--steps", "2", "--resample", "1", "--guide", "conv",
        "--th", "0.3", "--seed", "5", "--jobs", "2",
    ]));
    assert_eq!(fs::read(scene.join("pred.f32")).unwrap(), fs::read(pred2.join("s00000/pred.f32")).unwrap());

    ok(&run(&["eval", "--pred", p(&pred), "--data", p(&data)]));
    let report: Value = serde_json::from_str(&fs::read_to_string(pred.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["count"], 4);
    assert!(report["aggregate"]["psnr"].as_f64().unwrap().is_finite());
    let csv = fs::read_to_string(pred.join("per_sample.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("id,psnr,ssim,mae,rmse,sam"));

    // mae guide without a prior is a configuration error
    let out = run(&["sample", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&dir.path().join("p3")), "--guide", "mae"]);
    assert_eq!(out.status.code(), Some(2));
    // a checkpoint applied to a split with another band count
    let wide = synth(dir.path(), "wide", &["--channels", "13"]);
    let out = run(&["sample", "--ckpt", p(&ckpt), "--data", p(&wide), "--out", p(&dir.path().join("p4")), "--guide", "conv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format v1"));
    // missing checkpoint
    let out = run(&["sample", "--ckpt", p(&dir.path().join("nope")), "--data", p(&data), "--out", p(&dir.path().join("p5"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_of_targets_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", &[]);
    let pred = dir.path().join("pred");
    let m: Value = serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    for id in m["ids"].as_array().unwrap() {
        let id = id.as_str().unwrap();
        fs::create_dir_all(pred.join(id)).unwrap();
        fs::copy(data.join(id).join("target.f32"), pred.join(id).join("pred.f32")).unwrap();
    }
    let out = dir.path().join("report");
    ok(&run(&["eval", "--pred", p(&pred), "--data", p(&data), "--out", p(&out)]));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["aggregate"]["psnr"], "inf");
    assert!((report["aggregate"]["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    fs::remove_file(pred.join("s00001/pred.f32")).unwrap();
    assert_eq!(run(&["eval", "--pred", p(&pred), "--data", p(&data)]).status.code(), Some(3));
    assert_eq!(run(&["eval", "--pred", p(&pred), "--data", p(&dir.path().join("none"))]).status.code(), Some(3));
}

#[test]
fn divergent_training_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", &[]);
    let runs = dir.path().join("runs");
    let args = with_tiny(vec![
        "train", "--data", p(&data), "--run-dir", p(&runs), "--name", "boom", "--epochs", "3", "--set", "train.lr=1e30",
    ]);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("s0000"));
}

#[test]
fn mae_prior_drives_the_mae_guide() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", &[]);
    let prior = dir.path().join("mae.ckpt");
    ok(&run(&[
        "train-mae", "--data", p(&data), "--heldout", p(&data), "--out", p(&prior), "--epochs", "1",
        "--set", "eval.mae.encoder_dim=16", "--set", "eval.mae.encoder_depth=1", "--set", "eval.mae.decoder_dim=8",
        "--set", "eval.mae.decoder_depth=1", "--set", "eval.mae.heads=2", "--set", "eval.mae_train.batch_size=2",
    ]));
    let run_dir = train(dir.path(), &data, &[]);
    let pred = dir.path().join("pred");
    ok(&run(&[
        "sample", "--ckpt", p(&run_dir.join("ckpt-1")), "--data", p(&data), "--out", p(&pred), "--steps", "2", "--resample", "1",
        "--guide", "mae", "--mae", p(&prior), "--limit", "2",
    ]));
    assert!(pred.join("s00001/pred.f32").exists());
    assert!(!pred.join("s00002").exists());
    // the denoiser checkpoint is not a prior
    let out = run(&[
        "sample", "--ckpt", p(&run_dir.join("ckpt-1")), "--data", p(&data), "--out", p(&dir.path().join("q")), "--guide", "mae",
        "--mae", p(&run_dir.join("ckpt-1")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", &[]);
    let out = dir.path().join("abl");
    let args = with_tiny(vec![
        "ablate", "--grid", "sampler", "--data", p(&data), "--eval-data", p(&data), "--out", p(&out),
        "--set", "train.epochs=1", "--set", "sampler.guide=conv",
    ]);
    ok(&run(&args));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["5+0", "5+1", "5+2", "4+0", "4+1", "4+2"]);
    assert!(out.join("ablation.json").exists());
    assert!(out.join("config.json").exists());
}
