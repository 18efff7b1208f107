use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "seed = 1\niterations = 120\nwarmup_iterations = 20\nlr_decay_at = [100]\n\
[net]\nhidden_dims = [16]\nembedding_dim = 8\n\
[data]\nnum_classes = 10\nper_class = 6\nheldout_per_class = 3\nd_in = 8\n";

fn xbm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xbm"))
        .args(args)
        .env_remove("XBM_OUT_DIR")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn train(dir: &Path, name: &str, extra: &[&str]) -> std::path::PathBuf {
    let cfg = write_config(dir, SMALL);
    let out = dir.join(name);
    let mut args = vec!["train", "--config", &cfg, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = xbm(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn train_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "run", &[]);
    for f in ["manifest.toml", "metrics.csv", "checkpoint.bin", "memory.csv", "recall.csv", "recall.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    assert!(!out.join("metrics.csv.partial").exists());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("iter,phase,loss,valid_neg_mem,valid_neg_batch,lr\n"));
    assert_eq!(metrics.lines().count(), 121);
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("seed = 1"));
    assert!(manifest.contains("[run.artifacts]"));
}

#[test]
fn rerun_from_manifest_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let first = train(dir.path(), "a", &[]);
    let second = dir.path().join("b");
    let o = xbm(&[
        "train",
        "--config",
        first.join("manifest.toml").to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(first.join("metrics.csv")).unwrap(),
        fs::read(second.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(first.join("checkpoint.bin")).unwrap(),
        fs::read(second.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn baseline_override_and_stats_notice() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "base", &["--set", "xbm.enabled=false"]);
    assert!(!out.join("memory.csv").exists());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.lines().skip(1).all(|l| l.split(',').nth(1) == Some("plain")));

    let o = xbm(&["stats", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("no memory phase"));
    let mining = fs::read_to_string(out.join("mining.csv")).unwrap();
    assert!(mining.starts_with("iter,valid_mem,valid_batch,mean_mem,mean_batch\n"));
    assert!(mining.lines().skip(1).all(|l| l.split(',').nth(1) == Some("0")));
}

#[test]
fn stats_on_memory_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "mem", &[]);
    let o = xbm(&["stats", out.to_str().unwrap(), "--window", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mining = fs::read_to_string(out.join("mining.csv")).unwrap();
    assert_eq!(mining.lines().count(), 121);
}

#[test]
fn stats_without_metrics_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = xbm(&["stats", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("metrics.csv"));
}

#[test]
fn eval_reports_requested_ks() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "run", &[]);
    let cfg = dir.path().join("run.toml");
    let out = dir.path().join("eval");
    let o = xbm(&[
        "eval",
        "--checkpoint",
        run.join("checkpoint.bin").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--ks",
        "1,10,50",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("recall.csv")).unwrap();
    let ks: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ks, ["1", "10", "50"]);
    // held-out split trained on its own data should already retrieve well
    let r1: f64 = csv.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!(r1 > 0.5, "recall@1 {r1}");
}

#[test]
fn eval_k_larger_than_gallery_fails() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "run", &[]);
    let cfg = dir.path().join("run.toml");
    let o = xbm(&[
        "eval",
        "--checkpoint",
        run.join("checkpoint.bin").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--ks",
        "1,5000",
        "--out",
        dir.path().join("e").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_on_delimited_file() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "run", &[]);
    let csv = dir.path().join("data.csv");
    let mut text = String::from("label,a,b,c,d,e,f,g,h\n");
    for i in 0..12 {
        let c = i % 3;
        let row: Vec<String> = (0..8).map(|j| if j == c { "1.0".into() } else { format!("0.0{i}") }).collect();
        text.push_str(&format!("{c},{}\n", row.join(",")));
    }
    fs::write(&csv, text).unwrap();
    let o = xbm(&[
        "eval",
        "--checkpoint",
        run.join("checkpoint.bin").to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--ks",
        "1,3",
        "--out",
        dir.path().join("e").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    // wrong feature count
    fs::write(&csv, "label,a,b\n0,1,2\n1,2,3\n0,1,1\n").unwrap();
    let o = xbm(&[
        "eval",
        "--checkpoint",
        run.join("checkpoint.bin").to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--ks",
        "1",
        "--out",
        dir.path().join("e2").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("input features"));
}

#[test]
fn drift_reports_requested_steps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{SMALL}[drift]\nsteps = [1, 10, 100]\ninterval = 10\nprobe_count = 16\nlemma_trials = 20\n"),
    );
    let out = dir.path().join("drift");
    let o = xbm(&["drift", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let drift = fs::read_to_string(out.join("drift.csv")).unwrap();
    assert!(drift.starts_with("t,delta_t,mean_drift,p50_drift,p95_drift\n"));
    let mut steps: Vec<&str> = drift.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    steps.sort_unstable();
    steps.dedup();
    assert_eq!(steps, ["1", "10", "100"]);
    let lemma = fs::read_to_string(out.join("lemma.csv")).unwrap();
    assert!(lemma.starts_with("epsilon,grad_error_sq,ratio\n"));
    assert_eq!(lemma.lines().count(), 21);
}

#[test]
fn drift_schedule_past_the_run_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}[drift]\nsteps = [1000]\n"));
    let o = xbm(&["drift", "--config", &cfg, "--out", dir.path().join("d").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_names_the_path() {
    let o = xbm(&["train", "--config", "/nonexistent/run.toml", "--out", "/tmp/xbm-never"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/run.toml"));
}

#[test]
fn unknown_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[xbm]\nmemory_size = 3\n");
    let o = xbm(&["train", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("xbm.memory_size"));
    let o = xbm(&["train", "--set", "iterations=0", "--out", dir.path().join("y").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_prints_usage() {
    let o = xbm(&["fly"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).to_lowercase().contains("usage"));
}

#[test]
fn out_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = Command::new(env!("CARGO_BIN_EXE_xbm"))
        .args(["train", "--config", &cfg, "--seed", "9"])
        .env("XBM_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("train-seed9").join("metrics.csv").exists());
}
