//! Feature drift of embeddings across training iterations, and the
//! single-pair gradient-error check that motivates reusing stale embeddings.
//!
//! The drift of an input `x` at iteration `t` over a lag `dt` is
//! `||f(x; theta_t) - f(x; theta_{t-dt})||^2`. For unit embeddings it lies in
//! `[0, 4]`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{atomic_write, sample_without_replacement, LabeledDataset, SnapshotRow};
use crate::error::{Error, Result};
use crate::tensor::{norm_sq, DenseMatrix, EmbeddingNet};
use crate::train::{snapshot_schedule, train_observed, TrainConfig, TrainObserver, TrainOutcome};

pub const DEFAULT_PROBE_COUNT: usize = 256;

/// Fixed instances whose embeddings are tracked through a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    ids: Vec<usize>,
    features: DenseMatrix,
}

impl ProbeSet {
    /// Samples up to `count` distinct training instances.
    pub fn sample(dataset: &LabeledDataset, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = sample_without_replacement(&mut rng, dataset.len(), count.min(dataset.len()));
        ids.sort_unstable();
        Self {
            features: dataset.rows(&ids),
            ids,
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Probe embeddings under the parameters after `t` updates.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSnapshot {
    pub t: usize,
    pub ids: Vec<usize>,
    pub embeddings: DenseMatrix,
}

impl FeatureSnapshot {
    /// Rows in the memory snapshot format, labelled 0.
    pub fn rows(&self) -> Vec<SnapshotRow> {
        self.ids
            .iter()
            .zip(self.embeddings.iter_rows())
            .map(|(&id, e)| SnapshotRow {
                id,
                label: 0,
                iteration: self.t,
                embedding: e.to_vec(),
            })
            .collect()
    }
}

pub fn take_snapshot(net: &EmbeddingNet, probes: &ProbeSet, t: usize) -> Result<FeatureSnapshot> {
    if probes.is_empty() {
        return Err(Error::Config("probe set is empty".into()));
    }
    Ok(FeatureSnapshot {
        t,
        ids: probes.ids.clone(),
        embeddings: net.embed(&probes.features)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftRecord {
    /// The later of the two iterations.
    pub t: usize,
    /// `a.t - b.t`; negative when the arguments are in reverse order.
    pub delta_t: i64,
    pub per_probe: Vec<f64>,
    pub mean: f64,
}

impl DriftRecord {
    /// Nearest-rank percentile of the per-probe drift, `q` in `[0, 1]`.
    pub fn percentile(&self, q: f64) -> f64 {
        percentile(&self.per_probe, q)
    }
}

fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (q.clamp(0.0, 1.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.max(1) - 1]
}

/// Per-probe squared distance between two snapshots of the same probes.
pub fn feature_drift(a: &FeatureSnapshot, b: &FeatureSnapshot) -> Result<DriftRecord> {
    if a.ids != b.ids || a.embeddings.shape() != b.embeddings.shape() {
        return Err(Error::Contract("snapshots cover different probes".into()));
    }
    let per_probe: Vec<f64> = a
        .embeddings
        .iter_rows()
        .zip(b.embeddings.iter_rows())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum())
        .collect();
    let mean = per_probe.iter().sum::<f64>() / per_probe.len().max(1) as f64;
    Ok(DriftRecord {
        t: a.t.max(b.t),
        delta_t: a.t as i64 - b.t as i64,
        per_probe,
        mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LemmaCheckRecord {
    /// `||v_j - stale_v_j||^2`.
    pub epsilon: f64,
    /// Squared norm of the parameter-gradient difference.
    pub grad_error_sq: f64,
    pub ratio: f64,
}

pub const LEMMA_HEADER: &str = "epsilon,grad_error_sq,ratio";

/// Squared norm of `d(v_i . v_j)/dtheta - d(v_i . stale_v_j)/dtheta` where
/// `v_i = f(x_i; theta)` and the second vector of each pair is held constant.
pub fn single_pair_grad_error(
    net: &EmbeddingNet,
    x_i: &[f64],
    true_vj: &[f64],
    stale_vj: &[f64],
) -> Result<f64> {
    let d = net.output_dim();
    if true_vj.len() != d || stale_vj.len() != d {
        return Err(Error::Shape(format!(
            "pair vectors must have dimension {d}, got {} and {}",
            true_vj.len(),
            stale_vj.len()
        )));
    }
    let x = DenseMatrix::new(1, x_i.len(), x_i.to_vec())?;
    let grad_for = |v: &[f64]| -> Result<_> {
        let (_, cache) = net.forward(&x)?;
        net.backward(cache, &DenseMatrix::new(1, d, v.to_vec())?)
    };
    grad_for(true_vj)?.distance_sq(&grad_for(stale_vj)?)
}

/// Gradient error of one negative pair when `v_j` is replaced by a stale
/// copy, relative to how far the copy has drifted.
pub fn stale_pair_check(
    net: &EmbeddingNet,
    x_i: &[f64],
    true_vj: &[f64],
    stale_vj: &[f64],
) -> Result<LemmaCheckRecord> {
    let epsilon: f64 = true_vj.iter().zip(stale_vj).map(|(a, b)| (a - b) * (a - b)).sum();
    if epsilon == 0.0 {
        return Err(Error::Degenerate("stale vector equals the true vector".into()));
    }
    let grad_error_sq = single_pair_grad_error(net, x_i, true_vj, stale_vj)?;
    let ratio = grad_error_sq / epsilon;
    if !ratio.is_finite() {
        return Err(Error::Numeric("gradient-error ratio is not finite".into()));
    }
    Ok(LemmaCheckRecord {
        epsilon,
        grad_error_sq,
        ratio,
    })
}

/// Lemma checks for `trials` random unit perturbations of `true_vj`, each
/// moved by Gaussian noise of scale `noise` and renormalized.
pub fn stale_pair_sweep<R: Rng>(
    net: &EmbeddingNet,
    x_i: &[f64],
    true_vj: &[f64],
    trials: usize,
    noise: f64,
    rng: &mut R,
) -> Result<Vec<LemmaCheckRecord>> {
    let normal = rand_distr::Normal::new(0.0, noise)
        .map_err(|e| Error::Config(format!("noise scale: {e}")))?;
    let mut out = Vec::with_capacity(trials);
    while out.len() < trials {
        let moved: Vec<f64> = true_vj
            .iter()
            .map(|v| v + rand_distr::Distribution::sample(&normal, rng))
            .collect();
        let n = norm_sq(&moved).sqrt();
        if n < crate::tensor::MIN_NORM {
            continue;
        }
        let stale: Vec<f64> = moved.iter().map(|v| v / n).collect();
        match stale_pair_check(net, x_i, true_vj, &stale) {
            Ok(r) => out.push(r),
            Err(Error::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

pub fn write_lemma_csv(path: &Path, records: &[LemmaCheckRecord]) -> Result<()> {
    atomic_write(path, |w| {
        writeln!(w, "{LEMMA_HEADER}")?;
        for r in records {
            writeln!(w, "{},{},{}", r.epsilon, r.grad_error_sq, r.ratio)?;
        }
        Ok(())
    })
}

/// When to measure drift during a run.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftPlan {
    /// Lags to measure.
    pub steps: Vec<usize>,
    /// Iterations `t` at which drift is reported.
    pub eval_iters: Vec<usize>,
    pub probe_count: usize,
    pub probe_seed: u64,
}

impl DriftPlan {
    pub const PAPER_STEPS: [usize; 3] = [10, 100, 1000];

    /// Reports every `interval` iterations, starting at the largest lag.
    pub fn every(steps: &[usize], interval: usize, iterations: usize) -> Self {
        let start = steps.iter().copied().max().unwrap_or(0);
        let interval = interval.max(1);
        let first = start.div_ceil(interval) * interval;
        Self {
            steps: steps.to_vec(),
            eval_iters: (first..=iterations).step_by(interval).collect(),
            probe_count: DEFAULT_PROBE_COUNT,
            probe_seed: 0,
        }
    }

    pub fn validate(&self, iterations: usize) -> Result<()> {
        if self.steps.is_empty() || self.steps.contains(&0) {
            return Err(Error::Config("drift steps must be nonempty and positive".into()));
        }
        if self.probe_count == 0 {
            return Err(Error::Config("probe_count must be positive".into()));
        }
        if let Some(&t) = self.eval_iters.iter().find(|&&t| t > iterations) {
            return Err(Error::Config(format!(
                "drift schedule asks for iteration {t} but the run has {iterations}"
            )));
        }
        for &dt in &self.steps {
            if !self.eval_iters.iter().any(|&t| t >= dt) {
                return Err(Error::Config(format!(
                    "no scheduled iteration is late enough to measure a lag of {dt}"
                )));
            }
        }
        Ok(())
    }
}

/// One row of the drift table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftRow {
    pub t: usize,
    pub delta_t: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

pub const DRIFT_HEADER: &str = "t,delta_t,mean_drift,p50_drift,p95_drift";

#[derive(Debug, Clone)]
pub struct DriftReport {
    pub rows: Vec<DriftRow>,
}

impl DriftReport {
    /// Mean drift at (`t`, `delta_t`), if measured.
    pub fn mean_at(&self, t: usize, delta_t: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.t == t && r.delta_t == delta_t)
            .map(|r| r.mean)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{DRIFT_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.t, r.delta_t, r.mean, r.p50, r.p95);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let text = self.to_csv();
        atomic_write(path, |w| w.write_all(text.as_bytes()))
    }
}

/// Builds the drift table from stored snapshots keyed by iteration.
pub fn drift_table(snapshots: &BTreeMap<usize, FeatureSnapshot>, plan: &DriftPlan) -> Result<DriftReport> {
    let mut rows = Vec::new();
    for &t in &plan.eval_iters {
        for &dt in &plan.steps {
            if dt > t {
                continue;
            }
            let missing = |i: usize| Error::State(format!("no snapshot for iteration {i}"));
            let a = snapshots.get(&t).ok_or_else(|| missing(t))?;
            let b = snapshots.get(&(t - dt)).ok_or_else(|| missing(t - dt))?;
            let rec = feature_drift(a, b)?;
            rows.push(DriftRow {
                t,
                delta_t: dt,
                mean: rec.mean,
                p50: rec.percentile(0.5),
                p95: rec.percentile(0.95),
            });
        }
    }
    Ok(DriftReport { rows })
}

struct SnapshotCollector<'a> {
    probes: &'a ProbeSet,
    wanted: std::collections::BTreeSet<usize>,
    snapshots: BTreeMap<usize, FeatureSnapshot>,
}

impl TrainObserver for SnapshotCollector<'_> {
    fn on_params(&mut self, t: usize, net: &EmbeddingNet) -> Result<()> {
        if self.wanted.contains(&t) {
            self.snapshots.insert(t, take_snapshot(net, self.probes, t)?);
        }
        Ok(())
    }
}

/// Trains with `config` and measures probe drift on the schedule in `plan`.
pub fn drift_experiment(
    dataset: &LabeledDataset,
    config: &TrainConfig,
    plan: &DriftPlan,
) -> Result<(DriftReport, TrainOutcome)> {
    plan.validate(config.iterations)?;
    let probes = ProbeSet::sample(dataset, plan.probe_count, plan.probe_seed);
    let mut collector = SnapshotCollector {
        probes: &probes,
        wanted: snapshot_schedule(&plan.eval_iters, &plan.steps),
        snapshots: BTreeMap::new(),
    };
    let outcome = train_observed(dataset, config, &mut collector)?;
    Ok((drift_table(&collector.snapshots, plan)?, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_clusters;
    use crate::tensor::l2_normalize;

    fn snap(t: usize, rows: &[[f64; 2]]) -> FeatureSnapshot {
        FeatureSnapshot {
            t,
            ids: (0..rows.len()).collect(),
            embeddings: DenseMatrix::from_rows(rows).unwrap(),
        }
    }

    #[test]
    fn drift_extremes() {
        let a = snap(10, &[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]);
        let b = snap(5, &[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]);
        let r = feature_drift(&a, &b).unwrap();
        assert_eq!(r.per_probe, vec![0.0, 4.0, 2.0]);
        assert_eq!(r.mean, 2.0);
        assert_eq!((r.t, r.delta_t), (10, 5));
        let same = feature_drift(&a, &a).unwrap();
        assert!(same.per_probe.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn drift_is_symmetric_in_content() {
        let a = snap(10, &[[1.0, 0.0], [0.6, 0.8]]);
        let b = snap(4, &[[0.0, 1.0], [0.8, 0.6]]);
        let ab = feature_drift(&a, &b).unwrap();
        let ba = feature_drift(&b, &a).unwrap();
        assert_eq!(ab.per_probe, ba.per_probe);
        assert_eq!(ab.delta_t, -ba.delta_t);
    }

    #[test]
    fn probe_mismatch_is_a_contract_error() {
        let a = snap(1, &[[1.0, 0.0]]);
        let mut b = snap(0, &[[1.0, 0.0]]);
        b.ids = vec![7];
        assert!(matches!(feature_drift(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 10.0);
        assert_eq!(percentile(&v, 0.95), 19.0);
        assert_eq!(percentile(&v, 1.0), 20.0);
        assert_eq!(percentile(&[3.0], 0.5), 3.0);
    }

    #[test]
    fn snapshots_are_deterministic_and_consistent() {
        let ds = synth_clusters(5, 4, 6, 1.0, 0.3, 0).unwrap();
        let net = EmbeddingNet::init(&[6, 8, 3], 1).unwrap();
        let probes = ProbeSet::sample(&ds, 7, 2);
        assert_eq!(probes.len(), 7);
        let a = take_snapshot(&net, &probes, 3).unwrap();
        let b = take_snapshot(&net, &probes, 3).unwrap();
        assert_eq!(a, b);
        for row in a.embeddings.iter_rows() {
            assert!((norm_sq(row).sqrt() - 1.0).abs() < 1e-9);
        }
        let one = ProbeSet::sample(&ds, 1, 5);
        let s = take_snapshot(&net, &one, 0).unwrap();
        let direct = net.embed(&ds.rows(one.ids())).unwrap();
        assert_eq!(s.embeddings, direct);
        let empty = ProbeSet::sample(&ds, 0, 0);
        assert!(take_snapshot(&net, &empty, 0).unwrap_err().is_config());
    }

    fn lemma_setup() -> (EmbeddingNet, Vec<f64>, Vec<f64>) {
        let net = EmbeddingNet::init(&[5, 7, 4], 11).unwrap();
        let x = vec![0.3, -1.2, 0.5, 0.9, -0.1];
        let vj = l2_normalize(&[0.2, -0.4, 0.7, 0.1]).unwrap();
        (net, x, vj)
    }

    #[test]
    fn identical_stale_vector_has_no_error() {
        let (net, x, vj) = lemma_setup();
        assert_eq!(single_pair_grad_error(&net, &x, &vj, &vj).unwrap(), 0.0);
        assert!(matches!(stale_pair_check(&net, &x, &vj, &vj), Err(Error::Degenerate(_))));
    }

    #[test]
    fn halving_the_perturbation_quarters_both_terms() {
        let (net, x, vj) = lemma_setup();
        let delta = [0.05, 0.1, -0.03, 0.02];
        let stale: Vec<f64> = vj.iter().zip(&delta).map(|(v, d)| v + d).collect();
        let half: Vec<f64> = vj.iter().zip(&delta).map(|(v, d)| v + d / 2.0).collect();
        let full = stale_pair_check(&net, &x, &vj, &stale).unwrap();
        let halved = stale_pair_check(&net, &x, &vj, &half).unwrap();
        assert!((full.epsilon / halved.epsilon - 4.0).abs() < 1e-9);
        assert!((full.grad_error_sq / halved.grad_error_sq - 4.0).abs() < 1e-9);
    }

    #[test]
    fn sweep_ratio_is_bounded_by_its_max() {
        let (net, x, vj) = lemma_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let recs = stale_pair_sweep(&net, &x, &vj, 100, 0.1, &mut rng).unwrap();
        assert_eq!(recs.len(), 100);
        let c = recs.iter().map(|r| r.ratio).fold(0.0, f64::max);
        assert!(c.is_finite() && c > 0.0);
        for r in &recs {
            assert!(r.epsilon > 0.0);
            assert!(r.grad_error_sq <= c * r.epsilon * (1.0 + 1e-12));
        }
    }

    #[test]
    fn plan_validation() {
        let plan = DriftPlan::every(&DriftPlan::PAPER_STEPS, 250, 3000);
        assert_eq!(plan.eval_iters.first(), Some(&1000));
        assert_eq!(plan.eval_iters.last(), Some(&3000));
        assert!(plan.validate(3000).is_ok());
        assert!(plan.validate(2000).unwrap_err().is_config());
        let short = DriftPlan {
            eval_iters: vec![50],
            ..plan.clone()
        };
        assert!(short.validate(3000).is_err());
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            iterations: 40,
            warmup_iterations: 10,
            lr_decay_at: vec![],
            net: crate::train::NetConfig {
                hidden_dims: vec![8],
                embedding_dim: 4,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn experiment_reports_requested_steps() {
        let ds = synth_clusters(6, 5, 4, 1.0, 0.3, 0).unwrap();
        let plan = DriftPlan {
            probe_count: 10,
            ..DriftPlan::every(&[1, 5, 20], 10, 40)
        };
        let (report, _) = drift_experiment(&ds, &tiny_config(), &plan).unwrap();
        let steps: std::collections::BTreeSet<usize> = report.rows.iter().map(|r| r.delta_t).collect();
        assert_eq!(steps, [1, 5, 20].into());
        for r in &report.rows {
            assert!((0.0..=4.0).contains(&r.mean));
            assert!(r.p50 <= r.p95);
        }
        assert!(report.to_csv().starts_with(DRIFT_HEADER));
    }

    #[test]
    fn frozen_parameters_do_not_drift() {
        let ds = synth_clusters(6, 5, 4, 1.0, 0.3, 0).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            ..tiny_config()
        };
        let plan = DriftPlan {
            probe_count: 10,
            ..DriftPlan::every(&[1, 5, 20], 10, 40)
        };
        let (report, _) = drift_experiment(&ds, &cfg, &plan).unwrap();
        assert!(report.rows.iter().all(|r| r.mean == 0.0 && r.p95 == 0.0));
    }
}
