//! Recall@K retrieval evaluation and valid-negative mining statistics.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::data::{atomic_write, LabeledDataset};
use crate::error::{Error, Result};
use crate::tensor::{dot, EmbeddingNet};
use crate::train::StepRecord;
use crate::Label;

/// One side of a retrieval problem.
#[derive(Debug, Clone, Copy)]
pub struct RetrievalSet<'a> {
    pub embeddings: &'a crate::tensor::DenseMatrix,
    pub labels: &'a [Label],
    /// Instance ids, used for self-exclusion and tie-breaking.
    pub ids: &'a [usize],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub query_count: usize,
    pub gallery_count: usize,
    pub self_excluded: bool,
}

impl RetrievalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,recall\n");
        for (k, r) in self.ks.iter().zip(&self.recall) {
            let _ = writeln!(s, "{k},{r}");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let text = self.to_csv();
        atomic_write(path, |w| w.write_all(text.as_bytes()))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = self.to_json();
        atomic_write(path, |w| writeln!(w, "{text}"))
    }
}

fn check_set(name: &str, set: &RetrievalSet<'_>) -> Result<()> {
    if set.embeddings.rows() != set.labels.len() || set.labels.len() != set.ids.len() {
        return Err(Error::Shape(format!(
            "{name}: {} rows, {} labels, {} ids",
            set.embeddings.rows(),
            set.labels.len(),
            set.ids.len()
        )));
    }
    Ok(())
}

/// Ranks the gallery for every query by similarity (ties broken by lower
/// gallery id) and reports, for each `k`, the fraction of queries with a
/// same-label item among the first `k`.
///
/// With `self_exclude`, a gallery item with the query's id is skipped.
pub fn recall_at_k(
    queries: RetrievalSet<'_>,
    gallery: RetrievalSet<'_>,
    ks: &[usize],
    self_exclude: bool,
) -> Result<RetrievalReport> {
    check_set("queries", &queries)?;
    check_set("gallery", &gallery)?;
    if queries.embeddings.cols() != gallery.embeddings.cols() {
        return Err(Error::Shape(format!(
            "query dimension {} differs from gallery dimension {}",
            queries.embeddings.cols(),
            gallery.embeddings.cols()
        )));
    }
    if queries.labels.is_empty() {
        return Err(Error::Config("no queries".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("ks must be nonempty and positive".into()));
    }
    let effective = gallery.ids.len() - usize::from(self_exclude);
    let k_max = *ks.iter().max().expect("nonempty");
    if k_max >= effective {
        return Err(Error::Config(format!(
            "k = {k_max} needs a gallery of more than {k_max} items, have {effective}"
        )));
    }

    // rank of the first correct match for each query, or None
    let mut first_hit = Vec::with_capacity(queries.labels.len());
    for q in 0..queries.labels.len() {
        let qv = queries.embeddings.row(q);
        let mut scored: Vec<(f64, usize, Label)> = (0..gallery.ids.len())
            .filter(|&g| !(self_exclude && gallery.ids[g] == queries.ids[q]))
            .map(|g| (dot(qv, gallery.embeddings.row(g)), gallery.ids[g], gallery.labels[g]))
            .collect();
        let by_rank = |a: &(f64, usize, Label), b: &(f64, usize, Label)| {
            b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
        };
        let top = k_max.min(scored.len());
        if top < scored.len() {
            scored.select_nth_unstable_by(top, by_rank);
            scored.truncate(top);
        }
        scored.sort_by(by_rank);
        first_hit.push(scored.iter().position(|s| s.2 == queries.labels[q]));
    }
    let n = first_hit.len() as f64;
    let recall = ks
        .iter()
        .map(|&k| first_hit.iter().filter(|h| h.is_some_and(|r| r < k)).count() as f64 / n)
        .collect();
    Ok(RetrievalReport {
        ks: ks.to_vec(),
        recall,
        query_count: queries.labels.len(),
        gallery_count: gallery.ids.len(),
        self_excluded: self_exclude,
    })
}

/// Embeds `dataset` and evaluates every instance as a query against all
/// others.
pub fn evaluate_dataset(net: &EmbeddingNet, dataset: &LabeledDataset, ks: &[usize]) -> Result<RetrievalReport> {
    if net.input_dim() != dataset.dim() {
        return Err(Error::Shape(format!(
            "checkpoint expects {} input features, dataset has {}",
            net.input_dim(),
            dataset.dim()
        )));
    }
    let e = net.embed(dataset.features())?;
    let set = RetrievalSet {
        embeddings: &e,
        labels: dataset.labels(),
        ids: dataset.ids(),
    };
    recall_at_k(set, set, ks, true)
}

/// Held-out evaluation: queries are the `heldout` instances, the gallery is
/// `train` followed by `heldout`, and each query is excluded from its own
/// ranking. Labels must share one label space.
pub fn evaluate_heldout(
    net: &EmbeddingNet,
    train: &LabeledDataset,
    heldout: &LabeledDataset,
    ks: &[usize],
) -> Result<RetrievalReport> {
    let gallery_ds = train.concat(heldout)?;
    let gallery = net.embed(gallery_ds.features())?;
    let queries = net.embed(heldout.features())?;
    let offset = train.len();
    let query_ids: Vec<usize> = heldout.ids().iter().map(|i| i + offset).collect();
    recall_at_k(
        RetrievalSet {
            embeddings: &queries,
            labels: heldout.labels(),
            ids: &query_ids,
        },
        RetrievalSet {
            embeddings: &gallery,
            labels: gallery_ds.labels(),
            ids: gallery_ds.ids(),
        },
        ks,
        true,
    )
}

/// Valid negatives of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiningSample {
    pub iter: usize,
    pub valid_mem: usize,
    pub valid_batch: usize,
}

impl From<&StepRecord> for MiningSample {
    fn from(r: &StepRecord) -> Self {
        Self {
            iter: r.iter,
            valid_mem: r.valid_neg_mem,
            valid_batch: r.valid_neg_batch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningRow {
    pub iter: usize,
    pub valid_mem: usize,
    pub valid_batch: usize,
    pub mean_mem: f64,
    pub mean_batch: f64,
}

pub const MINING_HEADER: &str = "iter,valid_mem,valid_batch,mean_mem,mean_batch";

/// Per-iteration counts with trailing means over the last `window` samples
/// (fewer at the start of the stream).
pub fn mining_report(samples: &[MiningSample], window: usize) -> Vec<MiningRow> {
    let window = window.max(1);
    let mut sum_mem = 0usize;
    let mut sum_batch = 0usize;
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        sum_mem += s.valid_mem;
        sum_batch += s.valid_batch;
        if i >= window {
            sum_mem -= samples[i - window].valid_mem;
            sum_batch -= samples[i - window].valid_batch;
        }
        let n = (i + 1).min(window) as f64;
        rows.push(MiningRow {
            iter: s.iter,
            valid_mem: s.valid_mem,
            valid_batch: s.valid_batch,
            mean_mem: sum_mem as f64 / n,
            mean_batch: sum_batch as f64 / n,
        });
    }
    rows
}

pub fn mining_csv(rows: &[MiningRow]) -> String {
    let mut s = format!("{MINING_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.iter, r.valid_mem, r.valid_batch, r.mean_mem, r.mean_batch
        );
    }
    s
}

pub fn write_mining_csv(path: &Path, rows: &[MiningRow]) -> Result<()> {
    let text = mining_csv(rows);
    atomic_write(path, |w| w.write_all(text.as_bytes()))
}
