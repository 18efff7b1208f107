//! Run files.
//!
//! A run file is TOML. Training keys sit at the top level with the same names
//! as [`TrainConfig`] fields; the network, loss, memory and optimizer settings
//! are tables named after the corresponding fields, and `[data]`, `[drift]`
//! and `[eval]` configure the dataset and the analyses:
//!
//! ```toml
//! seed = 3
//! iterations = 3000
//! warmup_iterations = 200
//! lr_decay_at = [2000]
//!
//! [loss]
//! scheme = "contrastive"
//!
//! [xbm]
//! enabled = true
//! memory_ratio = 1.0
//!
//! [data]
//! num_classes = 100
//! per_class = 20
//! heldout_per_class = 10
//! ```
//!
//! Every key is optional. Unknown keys are rejected by name. A manifest
//! written by `xbm train` is itself a run file with every default filled in
//! plus a `[run]` table that is ignored on input.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_delimited, synth_clusters, DelimitedSchema, LabeledDataset};
use crate::drift::{DriftPlan, DEFAULT_PROBE_COUNT};
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Where the training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Delimited-text file; when empty, synthetic clusters are generated.
    pub path: String,
    pub label_column: usize,
    pub has_header: bool,
    pub num_classes: usize,
    /// Training instances per synthetic class.
    pub per_class: usize,
    /// Extra instances per synthetic class kept out of training and used as
    /// retrieval queries.
    pub heldout_per_class: usize,
    pub d_in: usize,
    pub center_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: String::new(),
            label_column: 0,
            has_header: true,
            num_classes: 100,
            per_class: 20,
            heldout_per_class: 10,
            d_in: 32,
            center_scale: 1.0,
            noise_sigma: 0.2,
            seed: 0,
        }
    }
}

/// Training data and, for synthetic data, held-out queries.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: LabeledDataset,
    pub heldout: Option<LabeledDataset>,
}

impl DataConfig {
    pub fn load(&self) -> Result<Datasets> {
        if !self.path.is_empty() {
            let schema = DelimitedSchema {
                label_column: self.label_column,
                has_header: self.has_header,
            };
            return Ok(Datasets {
                train: load_delimited(Path::new(&self.path), &schema)?,
                heldout: None,
            });
        }
        let all = synth_clusters(
            self.num_classes,
            self.per_class + self.heldout_per_class,
            self.d_in,
            self.center_scale,
            self.noise_sigma,
            self.seed,
        )?;
        if self.heldout_per_class == 0 {
            return Ok(Datasets {
                train: all,
                heldout: None,
            });
        }
        let (train, heldout) = all.split_per_class(self.per_class)?;
        Ok(Datasets {
            train,
            heldout: Some(heldout),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftConfig {
    pub steps: Vec<usize>,
    /// Drift is reported every `interval` iterations.
    pub interval: usize,
    pub probe_count: usize,
    pub probe_seed: u64,
    pub lemma_trials: usize,
    /// Standard deviation of the noise used to make stale vectors.
    pub lemma_noise: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            steps: DriftPlan::PAPER_STEPS.to_vec(),
            interval: 100,
            probe_count: DEFAULT_PROBE_COUNT,
            probe_seed: 0,
            lemma_trials: 1000,
            lemma_noise: 0.1,
        }
    }
}

impl DriftConfig {
    pub fn plan(&self, iterations: usize) -> DriftPlan {
        DriftPlan {
            probe_count: self.probe_count,
            probe_seed: self.probe_seed,
            ..DriftPlan::every(&self.steps, self.interval, iterations)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Window of the trailing means in the mining report.
    pub mining_window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 2, 4, 8],
            mining_window: 50,
        }
    }
}

/// Output bookkeeping recorded in manifests.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunInfo {
    pub command: String,
    pub out_dir: String,
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub data: DataConfig,
    pub drift: DriftConfig,
    pub eval: EvalConfig,
    pub run: RunInfo,
}

impl RunConfig {
    /// Parses a run file, rejecting keys that no setting consumes.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let config: RunConfig = toml::Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let resolved = config.to_table()?;
        let mut unknown = Vec::new();
        find_unknown(&table, &resolved, "", &mut unknown);
        if let Some(key) = unknown.first() {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        Ok(config)
    }

    /// Reads a run file and applies `key=value` overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| {
                    Error::Config(format!("{}: {}", p.display(), e.message()))
                })?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be nonempty and positive".into()));
        }
        Ok(())
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn find_unknown(input: &toml::Table, resolved: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in input {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        // [run] is free-form bookkeeping
        if path == "run" {
            continue;
        }
        match (value, resolved.get(key)) {
            (_, None) => out.push(path),
            (toml::Value::Table(inner), Some(toml::Value::Table(known))) => {
                find_unknown(inner, known, &path, out)
            }
            _ => {}
        }
    }
}

/// Sets `key=value` in `table`, where `key` is a dotted path and `value` is
/// a TOML value (bare words are taken as strings).
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cursor = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    cursor.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Directory for a run when `--out` is not given.
pub fn default_out_dir(root: Option<&Path>, command: &str, seed: u64) -> PathBuf {
    root.unwrap_or(Path::new("runs")).join(format!("{command}-seed{seed}"))
}
