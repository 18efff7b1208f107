//! Cross-batch memory.
//!
//! The memory is a FIFO of detached embeddings (with labels and instance
//! ids) from recent mini-batches. A training step embeds the batch, enqueues
//! copies of those embeddings, drops the oldest entries past capacity, and
//! then compares the anchors against everything in the queue. Gradients
//! flow only through the anchors.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{read_snapshot_csv, sample_without_replacement, write_snapshot_csv, LabeledDataset, SnapshotRow};
use crate::error::{Error, Result};
use crate::losses::{
    count_valid_negatives, pair_loss, pair_weights, similarity, LossHyperparams, PairLossResult,
    PairSide,
};
use crate::tensor::{norm_sq, DenseMatrix, EmbeddingNet};
use crate::Label;

/// Largest deviation from unit norm accepted for a stored embedding.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

/// Rows embedded per forward call when filling the memory.
const INIT_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct XbmConfig {
    pub enabled: bool,
    /// Memory size over training-set size, in `(0, 1]`.
    pub memory_ratio: f64,
}

impl Default for XbmConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            memory_ratio: 1.0,
        }
    }
}

impl XbmConfig {
    /// Memory capacity `round(memory_ratio * dataset_size)`, checked against
    /// the dataset and the batch size.
    pub fn capacity(&self, dataset_size: usize, batch_size: usize) -> Result<usize> {
        if !(self.memory_ratio > 0.0 && self.memory_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "xbm.memory_ratio must be in (0, 1], got {}",
                self.memory_ratio
            )));
        }
        let capacity = (self.memory_ratio * dataset_size as f64).round() as usize;
        if capacity > dataset_size {
            return Err(Error::Config(format!(
                "memory of {capacity} exceeds dataset size {dataset_size}"
            )));
        }
        if capacity < batch_size {
            return Err(Error::Config(format!(
                "memory of {capacity} entries is smaller than the batch size {batch_size}"
            )));
        }
        Ok(capacity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub embedding: Vec<f64>,
    pub label: Label,
    pub id: usize,
    /// Iteration whose parameters produced the embedding.
    pub iteration: usize,
}

/// Valid negatives seen by the anchors of one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MiningStats {
    pub valid_from_memory: usize,
    pub valid_from_batch: usize,
}

/// Fixed-capacity FIFO of embeddings.
#[derive(Debug, Clone)]
pub struct XbmState {
    capacity: usize,
    dim: usize,
    dataset_size: usize,
    entries: VecDeque<MemoryEntry>,
}

impl XbmState {
    pub fn new(capacity: usize, dim: usize, dataset_size: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "memory needs positive capacity and dimension, got {capacity} x {dim}"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            dataset_size,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    /// Fills a memory with the embeddings of randomly chosen training
    /// instances (without replacement) under the current model.
    pub fn init<R: Rng>(
        net: &EmbeddingNet,
        dataset: &LabeledDataset,
        config: &XbmConfig,
        batch_size: usize,
        iteration: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let capacity = config.capacity(dataset.len(), batch_size)?;
        let mut state = Self::new(capacity, net.output_dim(), dataset.len())?;
        let chosen = sample_without_replacement(rng, dataset.len(), capacity);
        for chunk in chosen.chunks(INIT_CHUNK) {
            let embeddings = net.embed(&dataset.rows(chunk))?;
            let labels = dataset.labels_of(chunk);
            state.push_rows(&embeddings, &labels, chunk, iteration)?;
        }
        Ok(state)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    /// Memory size over dataset size.
    pub fn memory_ratio(&self) -> f64 {
        self.capacity as f64 / self.dataset_size.max(1) as f64
    }

    /// Entries from oldest to newest.
    pub fn entries(&self) -> impl ExactSizeIterator<Item = &MemoryEntry> {
        self.entries.iter()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// Stored embeddings as a matrix, oldest first.
    pub fn features(&self) -> DenseMatrix {
        let mut data = Vec::with_capacity(self.entries.len() * self.dim);
        for e in &self.entries {
            data.extend_from_slice(&e.embedding);
        }
        DenseMatrix::new(self.entries.len(), self.dim, data).expect("entries are validated on insert")
    }

    /// Enqueues copies of a batch, then dequeues the oldest entries beyond
    /// capacity.
    pub fn update(
        &mut self,
        embeddings: &DenseMatrix,
        labels: &[Label],
        ids: &[usize],
        iteration: usize,
    ) -> Result<()> {
        if embeddings.rows() > self.capacity {
            return Err(Error::Contract(format!(
                "batch of {} exceeds memory capacity {}",
                embeddings.rows(),
                self.capacity
            )));
        }
        self.push_rows(embeddings, labels, ids, iteration)?;
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    fn push_rows(
        &mut self,
        embeddings: &DenseMatrix,
        labels: &[Label],
        ids: &[usize],
        iteration: usize,
    ) -> Result<()> {
        PairSide::new(embeddings, labels, ids)?;
        if embeddings.cols() != self.dim {
            return Err(Error::Shape(format!(
                "embeddings have dimension {}, memory stores {}",
                embeddings.cols(),
                self.dim
            )));
        }
        if let Some(last) = self.entries.back() {
            if iteration < last.iteration {
                return Err(Error::Contract(format!(
                    "iteration {iteration} is older than the newest entry ({})",
                    last.iteration
                )));
            }
        }
        for (i, row) in embeddings.iter_rows().enumerate() {
            if (norm_sq(row).sqrt() - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::Contract(format!("embedding {i} is not unit norm")));
            }
        }
        for ((row, &label), &id) in embeddings.iter_rows().zip(labels).zip(ids) {
            self.entries.push_back(MemoryEntry {
                embedding: row.to_vec(),
                label,
                id,
                iteration,
            });
        }
        Ok(())
    }

    fn require_entries(&self) -> Result<()> {
        if self.entries.is_empty() {
            Err(Error::State("memory is empty".into()))
        } else {
            Ok(())
        }
    }

    /// Memory-augmented pair loss: anchors against every stored entry, with
    /// the memory side held constant.
    pub fn loss(&self, anchors: PairSide<'_>, h: &LossHyperparams) -> Result<PairLossResult> {
        self.require_entries()?;
        let feats = self.features();
        let labels = self.labels();
        let ids = self.ids();
        pair_loss(anchors, PairSide::new(&feats, &labels, &ids)?, h)
    }

    /// Valid negative pairs of the anchors against the memory and against
    /// the anchor batch itself, under the active scheme.
    pub fn stats(&self, anchors: PairSide<'_>, h: &LossHyperparams) -> Result<MiningStats> {
        self.require_entries()?;
        let feats = self.features();
        let labels = self.labels();
        let ids = self.ids();
        let memory_side = PairSide::new(&feats, &labels, &ids)?;
        let mem_sim = similarity(anchors, memory_side)?;
        let valid_from_memory = count_valid_negatives(&mem_sim, &pair_weights(&mem_sim, h)?);
        Ok(MiningStats {
            valid_from_memory,
            valid_from_batch: in_batch_valid_negatives(anchors, h)?,
        })
    }

    /// Rows for [`crate::data::write_snapshot_csv`].
    pub fn snapshot_rows(&self) -> Vec<SnapshotRow> {
        self.entries
            .iter()
            .map(|e| SnapshotRow {
                id: e.id,
                label: e.label,
                iteration: e.iteration,
                embedding: e.embedding.clone(),
            })
            .collect()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_snapshot_csv(path, &self.snapshot_rows())
    }

    /// Restores a memory from a snapshot; the capacity is the snapshot size
    /// unless a larger one is given.
    pub fn load_csv(path: &Path, capacity: Option<usize>, dataset_size: usize) -> Result<Self> {
        let rows = read_snapshot_csv(path)?;
        let dim = rows.first().map_or(0, |r| r.embedding.len());
        let capacity = capacity.unwrap_or(rows.len()).max(rows.len());
        let mut state = Self::new(capacity, dim, dataset_size)?;
        for r in rows {
            let m = DenseMatrix::new(1, r.embedding.len(), r.embedding)?;
            state.push_rows(&m, &[r.label], &[r.id], r.iteration)?;
        }
        Ok(state)
    }
}

/// Valid negatives of a batch compared with itself.
pub fn in_batch_valid_negatives(batch: PairSide<'_>, h: &LossHyperparams) -> Result<usize> {
    let sim = similarity(batch, batch)?;
    Ok(count_valid_negatives(&sim, &pair_weights(&sim, h)?))
}
