//! The `xbm` command line.
//!
//! ```text
//! xbm train [--config FILE] [--set key=value]... [--seed N] [--out DIR]
//! xbm eval  --checkpoint FILE [--data CSV | --config FILE ...] [--ks 1,10,100] [--out DIR]
//! xbm drift [--config FILE] [--set key=value]... [--seed N] [--out DIR]
//! xbm stats RUN_DIR [--window N]
//! ```
//!
//! Exit status is 0 on success, 2 for configuration errors (including bad
//! arguments) and 3 for failures during the run. `XBM_OUT_DIR` sets the
//! root under which run directories are created when `--out` is absent.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{default_out_dir, RunConfig};
use crate::data::{load_checkpoint, load_delimited, save_checkpoint, DelimitedSchema};
use crate::drift::{drift_experiment, stale_pair_sweep, write_lemma_csv};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, evaluate_heldout, mining_report, write_mining_csv, MiningSample};
use crate::train::{train_observed, StepRecord, TrainObserver, METRICS_HEADER};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "xbm", version, about = "Cross-batch memory metric learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an embedding network and write metrics, checkpoint and memory.
    Train(RunArgs),
    /// Recall@K of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train while measuring feature drift; also runs the stale-gradient check.
    Drift(RunArgs),
    /// Valid-negative statistics from a finished run's metrics.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a setting, e.g. `--set xbm.enabled=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Training seed, applied after the overrides.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory for this run.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Root for run directories when `--out` is absent.
    #[arg(long, env = "XBM_OUT_DIR", hide = true)]
    pub out_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Delimited dataset to embed; defaults to the data described by the
    /// run configuration.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub label_column: Option<usize>,
    #[arg(long)]
    pub no_header: bool,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Directory of a `train` run.
    pub run_dir: PathBuf,
    /// Window of the trailing means.
    #[arg(long)]
    pub window: Option<usize>,
}

/// Parses `args` and runs the command, returning the process exit status.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Drift(a) => cmd_drift(&a),
        Command::Stats(a) => cmd_stats(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut config = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn resolve_out(args: &OutArgs, command: &str, seed: u64) -> Result<PathBuf> {
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| default_out_dir(args.out_root.as_deref(), command, seed));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_manifest(config: &mut RunConfig, command: &str, dir: &Path, artifacts: &[(&str, &str)]) -> Result<()> {
    config.run.command = command.to_string();
    config.run.out_dir = dir.display().to_string();
    config.run.artifacts = artifacts
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let text = config.to_toml_string()?;
    crate::data::atomic_write(&dir.join("manifest.toml"), |w| w.write_all(text.as_bytes()))
}

/// Streams step records to `metrics.csv.partial`, flushing every line.
struct MetricsSink {
    out: BufWriter<File>,
    partial: PathBuf,
}

impl MetricsSink {
    fn create(dir: &Path) -> Result<Self> {
        let partial = dir.join("metrics.csv.partial");
        let file = File::create(&partial).map_err(|e| Error::io(&partial, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{METRICS_HEADER}").map_err(|e| Error::io(&partial, e))?;
        Ok(Self { out, partial })
    }

    fn finish(mut self, path: &Path) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.partial, e))?;
        drop(self.out);
        fs::rename(&self.partial, path).map_err(|e| Error::io(path, e))
    }
}

impl TrainObserver for MetricsSink {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        writeln!(self.out, "{}", record.csv_line())
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.partial, e))
    }
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let mut config = resolve_config(&args.config)?;
    let dir = resolve_out(&args.out, "train", config.train.seed)?;
    let data = config.data.load()?;
    let mut artifacts = vec![
        ("metrics", "metrics.csv"),
        ("checkpoint", "checkpoint.bin"),
    ];
    if config.train.xbm.enabled {
        artifacts.push(("memory", "memory.csv"));
    }
    if data.heldout.is_some() {
        artifacts.push(("recall", "recall.csv"));
        artifacts.push(("recall_summary", "recall.json"));
    }
    write_manifest(&mut config, "train", &dir, &artifacts)?;
    info!("training {} instances into {}", data.train.len(), dir.display());

    let mut sink = MetricsSink::create(&dir)?;
    let outcome = train_observed(&data.train, &config.train, &mut sink)?;
    sink.finish(&dir.join("metrics.csv"))?;
    save_checkpoint(&dir.join("checkpoint.bin"), &outcome.net)?;
    if let Some(memory) = &outcome.memory {
        memory.save_csv(&dir.join("memory.csv"))?;
    }
    if let Some(heldout) = &data.heldout {
        let report = evaluate_heldout(&outcome.net, &data.train, heldout, &config.eval.ks)?;
        report.write_csv(&dir.join("recall.csv"))?;
        report.write_json(&dir.join("recall.json"))?;
        for (k, r) in report.ks.iter().zip(&report.recall) {
            println!("recall@{k} = {r:.4}");
        }
    }
    println!("run written to {}", dir.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut config = resolve_config(&args.config)?;
    if let Some(ks) = &args.ks {
        config.eval.ks = ks.clone();
    }
    let net = load_checkpoint(&args.checkpoint)?;
    let report = match &args.data {
        Some(path) => {
            let schema = DelimitedSchema {
                label_column: args.label_column.unwrap_or(0),
                has_header: !args.no_header,
            };
            evaluate_dataset(&net, &load_delimited(path, &schema)?, &config.eval.ks)?
        }
        None => {
            let data = config.data.load()?;
            if data.train.dim() != net.input_dim() {
                return Err(Error::Shape(format!(
                    "checkpoint expects {} input features, dataset has {}",
                    net.input_dim(),
                    data.train.dim()
                )));
            }
            match &data.heldout {
                Some(h) => evaluate_heldout(&net, &data.train, h, &config.eval.ks)?,
                None => evaluate_dataset(&net, &data.train, &config.eval.ks)?,
            }
        }
    };
    let dir = resolve_out(&args.out, "eval", config.train.seed)?;
    report.write_csv(&dir.join("recall.csv"))?;
    report.write_json(&dir.join("recall.json"))?;
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_drift(args: &RunArgs) -> Result<()> {
    let mut config = resolve_config(&args.config)?;
    let plan = config.drift.plan(config.train.iterations);
    plan.validate(config.train.iterations)?;
    let dir = resolve_out(&args.out, "drift", config.train.seed)?;
    let data = config.data.load()?;
    write_manifest(
        &mut config,
        "drift",
        &dir,
        &[("drift", "drift.csv"), ("lemma", "lemma.csv")],
    )?;
    let (report, outcome) = drift_experiment(&data.train, &config.train, &plan)?;
    report.write_csv(&dir.join("drift.csv"))?;

    // stale-gradient check on the trained network: anchor = first instance,
    // pair partner = first instance of another class
    let train = &data.train;
    let anchor = train.features().row(0).to_vec();
    let partner = train
        .labels()
        .iter()
        .position(|&l| l != train.labels()[0])
        .unwrap_or(train.len() - 1);
    let v_j = outcome.net.embed(&train.rows(&[partner]))?.row(0).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(config.drift.probe_seed);
    let records = stale_pair_sweep(
        &outcome.net,
        &anchor,
        &v_j,
        config.drift.lemma_trials,
        config.drift.lemma_noise,
        &mut rng,
    )?;
    write_lemma_csv(&dir.join("lemma.csv"), &records)?;
    let c = records.iter().map(|r| r.ratio).fold(0.0, f64::max);
    println!("max grad_error_sq / epsilon over {} trials: {c:.6}", records.len());
    println!("run written to {}", dir.display());
    Ok(())
}

fn cmd_stats(args: &StatsArgs) -> Result<()> {
    let metrics = args.run_dir.join("metrics.csv");
    let file = File::open(&metrics).map_err(|e| Error::io(&metrics, e))?;
    let mut samples = Vec::new();
    let mut has_memory = false;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&metrics, e))?;
        if n == 0 {
            if line.trim() != METRICS_HEADER {
                return Err(Error::Format(format!("{} has an unexpected header", metrics.display())));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let record = StepRecord::parse_csv_line(&line)?;
        has_memory |= record.phase == crate::train::Phase::Xbm;
        samples.push(MiningSample::from(&record));
    }
    if samples.is_empty() {
        return Err(Error::State(format!("{} has no iterations", metrics.display())));
    }
    if !has_memory {
        eprintln!("notice: run has no memory phase; valid_mem is zero throughout");
    }
    let window = match args.window {
        Some(w) => w,
        None => manifest_window(&args.run_dir).unwrap_or(50),
    };
    let rows = mining_report(&samples, window);
    let out = args.run_dir.join("mining.csv");
    write_mining_csv(&out, &rows)?;
    let phase2: Vec<_> = rows.iter().filter(|r| r.valid_mem > 0).collect();
    if !phase2.is_empty() {
        let n = phase2.len() as f64;
        let mem = phase2.iter().map(|r| r.valid_mem as f64).sum::<f64>() / n;
        let batch = phase2.iter().map(|r| r.valid_batch as f64).sum::<f64>() / n;
        println!("memory phase: mean valid negatives {mem:.1} from memory, {batch:.1} from batch");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn manifest_window(dir: &Path) -> Option<usize> {
    let text = fs::read_to_string(dir.join("manifest.toml")).ok()?;
    RunConfig::from_toml_str(&text).ok().map(|c| c.eval.mining_window)
}
