//! Pair-weighting losses.
//!
//! Every supported pair loss is written as a weighted sum of similarities,
//!
//! ```text
//! L = 1/m * sum_i [ sum_{y_j != y_i} w_ij S_ij  -  sum_{y_j == y_i} w_ij S_ij ]
//! ```
//!
//! where the weights come from a scheme (contrastive, triplet or
//! multi-similarity). Weights are treated as constants when differentiating,
//! so `dL/dv_i = 1/m * [ sum_neg w_ij v_j - sum_pos w_ij v_j ]`.
//!
//! Pairs of the same instance (equal ids) are excluded from both sums.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{check_finite, DenseMatrix};
use crate::Label;

/// Which pair-weighting scheme to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Contrastive,
    Triplet,
    Ms,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Contrastive => "contrastive",
            Scheme::Triplet => "triplet",
            Scheme::Ms => "ms",
        })
    }
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Contrastive, Scheme::Triplet, Scheme::Ms];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossHyperparams {
    pub scheme: Scheme,
    /// Negative pairs above this similarity are active (contrastive).
    pub lambda_contrastive: f64,
    /// Triplet margin.
    pub eta_triplet: f64,
    /// Negative-branch sharpness of the multi-similarity weights.
    pub ms_beta: f64,
    /// Positive-branch sharpness of the multi-similarity weights.
    pub ms_alpha: f64,
    /// Similarity offset of the multi-similarity weights.
    pub ms_lambda: f64,
}

impl Default for LossHyperparams {
    fn default() -> Self {
        Self {
            scheme: Scheme::Contrastive,
            lambda_contrastive: 0.5,
            eta_triplet: 0.1,
            ms_beta: 50.0,
            ms_alpha: 2.0,
            ms_lambda: 1.0,
        }
    }
}

impl LossHyperparams {
    pub fn with_scheme(scheme: Scheme) -> Self {
        Self {
            scheme,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_contrastive,
            self.eta_triplet,
            self.ms_beta,
            self.ms_alpha,
            self.ms_lambda,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("loss hyperparameters must be finite".into()));
        }
        if self.ms_beta <= 0.0 {
            return Err(Error::Config(format!("loss.ms_beta must be > 0, got {}", self.ms_beta)));
        }
        if self.ms_alpha <= 0.0 {
            return Err(Error::Config(format!(
                "loss.ms_alpha must be > 0, got {}",
                self.ms_alpha
            )));
        }
        if self.eta_triplet < 0.0 {
            return Err(Error::Config(format!(
                "loss.eta_triplet must be >= 0, got {}",
                self.eta_triplet
            )));
        }
        Ok(())
    }
}

/// Embeddings together with their labels and instance ids.
#[derive(Debug, Clone, Copy)]
pub struct PairSide<'a> {
    pub embeddings: &'a DenseMatrix,
    pub labels: &'a [Label],
    pub ids: &'a [usize],
}

impl<'a> PairSide<'a> {
    pub fn new(embeddings: &'a DenseMatrix, labels: &'a [Label], ids: &'a [usize]) -> Result<Self> {
        if labels.len() != embeddings.rows() || ids.len() != embeddings.rows() {
            return Err(Error::Shape(format!(
                "{} embeddings but {} labels and {} ids",
                embeddings.rows(),
                labels.len(),
                ids.len()
            )));
        }
        Ok(Self {
            embeddings,
            labels,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    Positive,
    Negative,
    /// Same instance on both sides.
    SelfPair,
}

/// `s[i][j] = <anchor_i, other_j>` plus the bookkeeping needed to classify
/// each pair.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    s: DenseMatrix,
    anchor_labels: Vec<Label>,
    other_labels: Vec<Label>,
    anchor_ids: Vec<usize>,
    other_ids: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn values(&self) -> &DenseMatrix {
        &self.s
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.s.get(i, j)
    }

    pub fn anchors(&self) -> usize {
        self.s.rows()
    }

    pub fn others(&self) -> usize {
        self.s.cols()
    }

    pub fn kind(&self, i: usize, j: usize) -> PairKind {
        if self.anchor_ids[i] == self.other_ids[j] {
            PairKind::SelfPair
        } else if self.anchor_labels[i] == self.other_labels[j] {
            PairKind::Positive
        } else {
            PairKind::Negative
        }
    }

    /// Total number of negative pairs, regardless of weight.
    pub fn negative_pairs(&self) -> usize {
        self.count_kind(PairKind::Negative)
    }

    pub fn positive_pairs(&self) -> usize {
        self.count_kind(PairKind::Positive)
    }

    fn count_kind(&self, kind: PairKind) -> usize {
        (0..self.anchors())
            .map(|i| (0..self.others()).filter(|&j| self.kind(i, j) == kind).count())
            .sum()
    }
}

/// Non-negative weight per pair; the sign comes from the pair kind.
#[derive(Debug, Clone, PartialEq)]
pub struct PairWeightMatrix {
    w: DenseMatrix,
}

impl PairWeightMatrix {
    pub fn values(&self) -> &DenseMatrix {
        &self.w
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w.get(i, j)
    }
}

/// Loss value and its gradient with respect to the anchor embeddings.
#[derive(Debug, Clone)]
pub struct PairLossResult {
    pub loss: f64,
    pub grad_anchor: DenseMatrix,
    /// Negative pairs with non-zero weight, i.e. non-zero gradient.
    pub valid_negative_count: usize,
    pub valid_positive_count: usize,
}

/// Cosine similarities between anchors and others (rows assumed unit norm).
pub fn similarity(anchors: PairSide<'_>, others: PairSide<'_>) -> Result<SimilarityMatrix> {
    let s = anchors.embeddings.matmul_transposed(others.embeddings)?;
    Ok(SimilarityMatrix {
        s,
        anchor_labels: anchors.labels.to_vec(),
        other_labels: others.labels.to_vec(),
        anchor_ids: anchors.ids.to_vec(),
        other_ids: others.ids.to_vec(),
    })
}

/// Contrastive weights: negatives count iff `S > lambda`, positives always 1.
pub fn contrastive_weights(sim: &SimilarityMatrix, h: &LossHyperparams) -> PairWeightMatrix {
    let mut w = DenseMatrix::zeros(sim.anchors(), sim.others());
    let data = w.data_mut();
    let n = sim.others();
    for i in 0..sim.anchors() {
        for j in 0..n {
            data[i * n + j] = match sim.kind(i, j) {
                PairKind::Positive => 1.0,
                PairKind::Negative if sim.get(i, j) > h.lambda_contrastive => 1.0,
                _ => 0.0,
            };
        }
    }
    PairWeightMatrix { w }
}

/// Triplet weights.
///
/// A negative `(i, j)` is weighted by the number of positives `k` of the
/// same anchor with `S_ik < S_ij + eta`; a positive `(i, k)` by the number
/// of negatives `j` with `S_ij > S_ik - eta`. Both count the same violated
/// triplets from either end.
pub fn triplet_weights(sim: &SimilarityMatrix, h: &LossHyperparams) -> PairWeightMatrix {
    let (m, n) = (sim.anchors(), sim.others());
    let mut w = DenseMatrix::zeros(m, n);
    let data = w.data_mut();
    let eta = h.eta_triplet;
    for i in 0..m {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for j in 0..n {
            match sim.kind(i, j) {
                PairKind::Positive => positives.push(j),
                PairKind::Negative => negatives.push(j),
                PairKind::SelfPair => {}
            }
        }
        for &j in &negatives {
            let s_neg = sim.get(i, j);
            let count = positives
                .iter()
                .filter(|&&k| sim.get(i, k) < s_neg + eta)
                .count();
            data[i * n + j] = count as f64;
        }
        for &k in &positives {
            let s_pos = sim.get(i, k);
            let count = negatives
                .iter()
                .filter(|&&j| sim.get(i, j) + eta > s_pos)
                .count();
            data[i * n + k] = count as f64;
        }
    }
    PairWeightMatrix { w }
}

/// Multi-similarity weights.
///
/// Negatives: `exp(beta (S_ij - lambda)) / (1 + sum_{k in N_i} exp(beta (S_ik - lambda)))`.
/// Positives: the same with `-alpha` in place of `beta`, summed over `P_i`.
/// Evaluated with the largest exponent shifted out.
pub fn ms_weights(sim: &SimilarityMatrix, h: &LossHyperparams) -> Result<PairWeightMatrix> {
    let (m, n) = (sim.anchors(), sim.others());
    let mut w = DenseMatrix::zeros(m, n);
    for i in 0..m {
        let mut neg = Vec::new();
        let mut pos = Vec::new();
        for j in 0..n {
            match sim.kind(i, j) {
                PairKind::Negative => neg.push((j, h.ms_beta * (sim.get(i, j) - h.ms_lambda))),
                PairKind::Positive => pos.push((j, -h.ms_alpha * (sim.get(i, j) - h.ms_lambda))),
                PairKind::SelfPair => {}
            }
        }
        let row = w.row_mut(i);
        for group in [&neg, &pos] {
            for (j, value) in shifted_softmax_with_one(group) {
                row[j] = value;
            }
        }
    }
    check_finite(w.data()).map_err(|e| Error::Numeric(format!("multi-similarity weights: {e}")))?;
    Ok(PairWeightMatrix { w })
}

/// `exp(a_j) / (1 + sum_k exp(a_k))` for each `(j, a_j)`, computed as
/// `exp(a_j - c) / (exp(-c) + sum_k exp(a_k - c))` with `c = max(0, max a)`.
fn shifted_softmax_with_one(exponents: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let c = exponents.iter().fold(0.0_f64, |acc, &(_, a)| acc.max(a));
    let denom = (-c).exp() + exponents.iter().map(|&(_, a)| (a - c).exp()).sum::<f64>();
    exponents
        .iter()
        .map(|&(j, a)| (j, (a - c).exp() / denom))
        .collect()
}

/// Weights for the configured scheme.
pub fn pair_weights(sim: &SimilarityMatrix, h: &LossHyperparams) -> Result<PairWeightMatrix> {
    match h.scheme {
        Scheme::Contrastive => Ok(contrastive_weights(sim, h)),
        Scheme::Triplet => Ok(triplet_weights(sim, h)),
        Scheme::Ms => ms_weights(sim, h),
    }
}

/// Number of negative pairs that receive a non-zero weight.
pub fn count_valid_negatives(sim: &SimilarityMatrix, w: &PairWeightMatrix) -> usize {
    count_valid(sim, w, PairKind::Negative)
}

fn count_valid(sim: &SimilarityMatrix, w: &PairWeightMatrix, kind: PairKind) -> usize {
    (0..sim.anchors())
        .map(|i| {
            (0..sim.others())
                .filter(|&j| sim.kind(i, j) == kind && w.get(i, j) > 0.0)
                .count()
        })
        .sum()
}

/// Signed weights: `+w` for negatives, `-w` for positives, 0 for self pairs.
fn signed_weights(sim: &SimilarityMatrix, w: &PairWeightMatrix) -> DenseMatrix {
    let (m, n) = (sim.anchors(), sim.others());
    let mut signed = DenseMatrix::zeros(m, n);
    let data = signed.data_mut();
    for i in 0..m {
        for j in 0..n {
            data[i * n + j] = match sim.kind(i, j) {
                PairKind::Negative => w.get(i, j),
                PairKind::Positive => -w.get(i, j),
                PairKind::SelfPair => 0.0,
            };
        }
    }
    signed
}

/// Weighted pair loss and its anchor gradient, with `others` held constant.
///
/// `others` must be the embeddings `sim` was computed against.
pub fn gpw_loss(
    sim: &SimilarityMatrix,
    w: &PairWeightMatrix,
    others: &DenseMatrix,
) -> Result<PairLossResult> {
    let (m, n) = (sim.anchors(), sim.others());
    if w.values().shape() != (m, n) {
        return Err(Error::Shape(format!(
            "weights are {}x{}, similarities {m}x{n}",
            w.values().rows(),
            w.values().cols()
        )));
    }
    if others.rows() != n {
        return Err(Error::Shape(format!(
            "{} other embeddings for {n} similarity columns",
            others.rows()
        )));
    }
    if m == 0 {
        return Err(Error::Shape("loss needs at least one anchor".into()));
    }
    let signed = signed_weights(sim, w);
    let inv_m = 1.0 / m as f64;
    let loss = signed
        .data()
        .iter()
        .zip(sim.values().data())
        .map(|(w, s)| w * s)
        .sum::<f64>()
        * inv_m;
    let mut grad_anchor = signed.matmul(others)?;
    grad_anchor.scale(inv_m)?;
    if !loss.is_finite() {
        return Err(Error::Numeric("pair loss is not finite".into()));
    }
    Ok(PairLossResult {
        loss,
        grad_anchor,
        valid_negative_count: count_valid(sim, w, PairKind::Negative),
        valid_positive_count: count_valid(sim, w, PairKind::Positive),
    })
}

/// Anchor-vs-others loss for the configured scheme.
pub fn pair_loss(
    anchors: PairSide<'_>,
    others: PairSide<'_>,
    h: &LossHyperparams,
) -> Result<PairLossResult> {
    let sim = similarity(anchors, others)?;
    let w = pair_weights(&sim, h)?;
    gpw_loss(&sim, &w, others.embeddings)
}

/// In-batch loss, where every embedding is both an anchor and a comparison
/// target.
///
/// The loss equals [`pair_loss`] of the batch against itself. The returned
/// gradient is the full derivative with respect to the batch embeddings, so
/// it includes the route through the comparison side as well.
pub fn in_batch_loss(batch: PairSide<'_>, h: &LossHyperparams) -> Result<PairLossResult> {
    let sim = similarity(batch, batch)?;
    let w = pair_weights(&sim, h)?;
    let mut result = gpw_loss(&sim, &w, batch.embeddings)?;
    let mut other_route = signed_weights(&sim, &w)
        .transpose()
        .matmul(batch.embeddings)?;
    other_route.scale(1.0 / batch.len() as f64)?;
    result.grad_anchor.add_assign(&other_route)?;
    Ok(result)
}
