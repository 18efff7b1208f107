//! Mini-batch training with optional cross-batch memory.
//!
//! Iterations `0..warmup_iterations` train on the plain in-batch loss. At
//! `warmup_iterations` the memory is filled from randomly chosen training
//! instances under the warmed-up model, and every later iteration runs:
//!
//! 1. embed the batch (anchors),
//! 2. enqueue detached copies of the anchors, dequeue the oldest entries,
//! 3. compare the anchors with the whole memory and take the loss,
//! 4. back-propagate through the anchors only and take an Adam step.
//!
//! With the memory disabled every iteration is a plain in-batch step.

use std::collections::BTreeSet;
use std::fmt;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_without_replacement, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::{in_batch_loss, LossHyperparams, PairSide};
use crate::memory::{in_batch_valid_negatives, XbmConfig, XbmState};
use crate::tensor::{DenseMatrix, EmbeddingNet, ParamGradients};
use crate::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64],
            embedding_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Classes per batch.
    pub p: usize,
    /// Instances per class in a batch.
    pub k: usize,
    pub iterations: usize,
    pub warmup_iterations: usize,
    pub lr: f64,
    /// Iterations at which the learning rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_at: Vec<usize>,
    pub lr_decay_factor: f64,
    /// L2 coefficient added to the gradient before the Adam update.
    pub weight_decay: f64,
    pub adam: AdamConfig,
    pub net: NetConfig,
    pub loss: LossHyperparams,
    pub xbm: XbmConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            p: 4,
            k: 2,
            iterations: 3000,
            warmup_iterations: 200,
            lr: 1e-2,
            lr_decay_at: vec![2000],
            lr_decay_factor: 0.1,
            weight_decay: 5e-4,
            adam: AdamConfig::default(),
            net: NetConfig::default(),
            loss: LossHyperparams::default(),
            xbm: XbmConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.k < 2 {
            return cfg(format!("k must be >= 2 so every anchor can have a positive, got {}", self.k));
        }
        if self.p < 1 || self.batch_size() < 2 {
            return cfg(format!("p must be >= 1, got {}", self.p));
        }
        if self.iterations == 0 {
            return cfg("iterations must be > 0".into());
        }
        if self.warmup_iterations >= self.iterations {
            return cfg(format!(
                "warmup_iterations ({}) must be below iterations ({})",
                self.warmup_iterations, self.iterations
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return cfg(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return cfg(format!("lr_decay_factor must be > 0, got {}", self.lr_decay_factor));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return cfg(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return cfg("adam.beta1/beta2 must be in [0, 1) and adam.eps > 0".into());
        }
        if self.net.embedding_dim == 0 || self.net.hidden_dims.contains(&0) {
            return cfg("net widths must be positive".into());
        }
        self.loss.validate()
    }

    /// Learning rate in effect at `iteration` (piecewise constant).
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let decays = self.lr_decay_at.iter().filter(|&&t| t <= iteration).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.net.hidden_dims);
        dims.push(self.net.embedding_dim);
        dims
    }
}

/// Moment estimates for [`adam_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(net: &EmbeddingNet, config: &AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = ParamGradients::zeros_like(net)
            .slices()
            .map(|s| vec![0.0; s.len()])
            .collect();
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second
    }
}

/// One bias-corrected Adam update with `weight_decay * theta` added to the
/// gradient.
pub fn adam_step(
    net: &mut EmbeddingNet,
    grads: &ParamGradients,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let shapes_match = grads.slices().count() == state.first.len()
        && grads.slices().zip(&state.first).all(|(g, m)| g.len() == m.len())
        && net.param_count() == grads.len();
    if !shapes_match {
        return Err(Error::Contract(
            "gradients, optimizer state and parameters differ in shape".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let params = net.param_slices_mut();
    for (((p, g), m), v) in params
        .zip(grads.slices())
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        for i in 0..p.len() {
            let gi = g[i] + weight_decay * p[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// A PK mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub ids: Vec<usize>,
    pub labels: Vec<Label>,
    pub features: DenseMatrix,
    /// Classes that had fewer than K instances and were sampled with
    /// replacement.
    pub oversampled: Vec<Label>,
}

/// Draws `p` distinct classes uniformly and `k` instances from each.
///
/// Instances are drawn without replacement inside a class; a class with
/// fewer than `k` members is drawn with replacement and reported in
/// [`MiniBatch::oversampled`].
pub fn pk_sample<R: Rng>(dataset: &LabeledDataset, p: usize, k: usize, rng: &mut R) -> Result<MiniBatch> {
    let classes: Vec<(&Label, &Vec<usize>)> = dataset.class_index().iter().collect();
    if classes.len() < p {
        return Err(Error::Config(format!(
            "PK sampling needs {p} classes, dataset has {}",
            classes.len()
        )));
    }
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let mut ids = Vec::with_capacity(p * k);
    let mut labels = Vec::with_capacity(p * k);
    let mut oversampled = Vec::new();
    for c in sample_without_replacement(rng, classes.len(), p) {
        let (&label, members) = classes[c];
        if members.len() >= k {
            ids.extend(sample_without_replacement(rng, members.len(), k).into_iter().map(|i| members[i]));
        } else {
            oversampled.push(label);
            ids.extend((0..k).map(|_| members[rng.random_range(0..members.len())]));
        }
        labels.extend(std::iter::repeat_n(label, k));
    }
    Ok(MiniBatch {
        features: dataset.rows(&ids),
        ids,
        labels,
        oversampled,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// In-batch loss, memory disabled.
    Plain,
    /// In-batch loss before the memory is initialised.
    Warmup,
    /// Memory-augmented loss.
    Xbm,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Plain => "plain",
            Phase::Warmup => "warmup",
            Phase::Xbm => "xbm",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Phase::Plain),
            "warmup" => Ok(Phase::Warmup),
            "xbm" => Ok(Phase::Xbm),
            other => Err(Error::Format(format!("unknown phase `{other}`"))),
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub iter: usize,
    pub phase: Phase,
    pub loss: f64,
    pub valid_neg_mem: usize,
    pub valid_neg_batch: usize,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "iter,phase,loss,valid_neg_mem,valid_neg_batch,lr";

impl StepRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iter, self.phase, self.loss, self.valid_neg_mem, self.valid_neg_batch, self.lr
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = |what: &str| Error::Format(format!("metrics line `{line}`: bad {what}"));
        if f.len() != 6 {
            return Err(bad("field count"));
        }
        Ok(Self {
            iter: f[0].parse().map_err(|_| bad("iter"))?,
            phase: f[1].parse()?,
            loss: f[2].parse().map_err(|_| bad("loss"))?,
            valid_neg_mem: f[3].parse().map_err(|_| bad("valid_neg_mem"))?,
            valid_neg_batch: f[4].parse().map_err(|_| bad("valid_neg_batch"))?,
            lr: f[5].parse().map_err(|_| bad("lr"))?,
        })
    }
}

/// Hooks into the training loop.
pub trait TrainObserver {
    /// Called with the parameters after `t` updates, for `t = 0..=iterations`.
    fn on_params(&mut self, _t: usize, _net: &EmbeddingNet) -> Result<()> {
        Ok(())
    }

    /// Called after each step with its log record.
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: EmbeddingNet,
    pub log: Vec<StepRecord>,
    pub memory: Option<XbmState>,
}

pub fn train(dataset: &LabeledDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(dataset, config, &mut ())
}

/// Network initialisation seed, kept apart from the sampling stream.
fn init_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

pub fn train_observed<O: TrainObserver + ?Sized>(
    dataset: &LabeledDataset,
    config: &TrainConfig,
    observer: &mut O,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let batch_size = config.batch_size();
    if config.xbm.enabled {
        config.xbm.capacity(dataset.len(), batch_size)?;
    }
    let small: Vec<Label> = dataset
        .class_index()
        .iter()
        .filter(|(_, ids)| ids.len() < config.k)
        .map(|(&l, _)| l)
        .collect();
    if !small.is_empty() {
        warn!(
            "{} classes have fewer than k={} instances and will be sampled with replacement",
            small.len(),
            config.k
        );
    }

    let mut net = EmbeddingNet::init(&config.layer_dims(dataset.dim()), init_seed(config.seed))?;
    let mut adam = AdamState::new(&net, &config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut memory: Option<XbmState> = None;
    let mut log = Vec::with_capacity(config.iterations);

    observer.on_params(0, &net)?;
    for iter in 0..config.iterations {
        let batch = pk_sample(dataset, config.p, config.k, &mut rng)?;
        if config.xbm.enabled && iter == config.warmup_iterations {
            memory = Some(XbmState::init(&net, dataset, &config.xbm, batch_size, iter, &mut rng)?);
        }
        let (anchors, cache) = net.forward(&batch.features)?;
        let side = PairSide::new(&anchors, &batch.labels, &batch.ids)?;
        let (phase, result, valid_mem, valid_batch) = match memory.as_mut() {
            Some(mem) => {
                mem.update(&anchors, &batch.labels, &batch.ids, iter)?;
                let result = mem.loss(side, &config.loss)?;
                let valid_batch = in_batch_valid_negatives(side, &config.loss)?;
                let valid_mem = result.valid_negative_count;
                (Phase::Xbm, result, valid_mem, valid_batch)
            }
            None => {
                let result = in_batch_loss(side, &config.loss)?;
                let valid_batch = result.valid_negative_count;
                let phase = if config.xbm.enabled {
                    Phase::Warmup
                } else {
                    Phase::Plain
                };
                (phase, result, 0, valid_batch)
            }
        };
        let grads = net.backward(cache, &result.grad_anchor)?;
        let lr = config.lr_at(iter);
        adam_step(&mut net, &grads, &mut adam, lr, config.weight_decay)?;

        let record = StepRecord {
            iter,
            phase,
            loss: result.loss,
            valid_neg_mem: valid_mem,
            valid_neg_batch: valid_batch,
            lr,
        };
        observer.on_step(&record)?;
        log.push(record);
        observer.on_params(iter + 1, &net)?;
    }
    Ok(TrainOutcome { net, log, memory })
}

/// Iterations at which parameters should be captured to measure drift at
/// `eval_iters` for each step in `steps`.
pub fn snapshot_schedule(eval_iters: &[usize], steps: &[usize]) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    for &t in eval_iters {
        out.insert(t);
        for &dt in steps {
            if dt <= t {
                out.insert(t - dt);
            }
        }
    }
    out
}
