use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matrix::{check_finite, l2_normalize_backward, DenseMatrix};
use crate::error::{Error, Result};

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// One affine layer, `y = W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    weight: DenseMatrix,
    bias: Vec<f64>,
}

impl Linear {
    pub fn new(weight: DenseMatrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::Shape(format!(
                "bias has length {}, weight has {} rows",
                bias.len(),
                weight.rows()
            )));
        }
        check_finite(&bias)?;
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &DenseMatrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Feed-forward network with rectifier hidden activations and a final
/// L2 normalization, so every embedding lies on the unit sphere.
///
/// Each parameter mutation assigns a new stamp; forward caches remember the
/// stamp they were produced under and are rejected once it changes.
#[derive(Debug, Clone)]
pub struct EmbeddingNet {
    layers: Vec<Linear>,
    stamp: u64,
}

impl PartialEq for EmbeddingNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations retained by [`EmbeddingNet::forward`] for one backward pass.
#[derive(Debug)]
pub struct ForwardCache {
    stamp: u64,
    /// Input to each layer.
    inputs: Vec<DenseMatrix>,
    /// Pre-activation output of each layer; the last one is the
    /// un-normalized embedding.
    pre_activations: Vec<DenseMatrix>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows()
    }
}

/// Gradients shaped like the parameters of an [`EmbeddingNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    layers: Vec<(DenseMatrix, Vec<f64>)>,
}

impl ParamGradients {
    pub fn zeros_like(net: &EmbeddingNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    (
                        DenseMatrix::zeros(l.output_dim(), l.input_dim()),
                        vec![0.0; l.output_dim()],
                    )
                })
                .collect(),
        }
    }

    /// `(weight gradient, bias gradient)` per layer.
    pub fn layers(&self) -> &[(DenseMatrix, Vec<f64>)] {
        &self.layers
    }

    /// Flat slices in the same order as [`EmbeddingNet::param_slices_mut`].
    pub fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.data(), b.as_slice()])
    }

    pub fn len(&self) -> usize {
        self.slices().map(<[f64]>::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn norm_sq(&self) -> f64 {
        self.slices().flatten().map(|g| g * g).sum()
    }

    /// Squared L2 distance to `other`.
    pub fn distance_sq(&self, other: &ParamGradients) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::Shape("gradient sets differ in shape".into()));
        }
        Ok(self
            .slices()
            .flatten()
            .zip(other.slices().flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().flatten().copied().collect()
    }

    fn same_shape(&self, other: &ParamGradients) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.0.shape() == b.0.shape() && a.1.len() == b.1.len())
    }
}

impl EmbeddingNet {
    /// Builds a network from explicit layers, checking the shape chain.
    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[1].input_dim() != pair[0].output_dim() {
                return Err(Error::Shape(format!(
                    "layer {} expects input {}, layer {k} produces {}",
                    k + 1,
                    pair[1].input_dim(),
                    pair[0].output_dim()
                )));
            }
        }
        Ok(Self {
            layers,
            stamp: fresh_stamp(),
        })
    }

    /// Random network for layer widths `dims = [in, hidden.., out]`.
    ///
    /// Weights are uniform in `±sqrt(6 / fan_in)`, biases zero.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Shape(format!(
                "need input and output widths, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Shape(format!("zero-width layer in {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Linear::new(DenseMatrix::new(fan_out, fan_in, data)?, vec![0.0; fan_out])
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Layer widths `[in, hidden.., out]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Linear::output_dim))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }

    /// Mutable parameter slices (weight then bias, per layer). Invalidates
    /// every outstanding forward cache.
    pub fn param_slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.stamp = fresh_stamp();
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
    }

    /// Embeds a batch (one sample per row) and keeps what backward needs.
    pub fn forward(&self, batch: &DenseMatrix) -> Result<(DenseMatrix, ForwardCache)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} features, network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = batch.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = current.matmul_transposed(&layer.weight)?;
            for i in 0..z.rows() {
                for (x, b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
                    *x += b;
                }
            }
            check_finite(z.data())?;
            inputs.push(current);
            current = if k + 1 < self.layers.len() {
                let mut a = z.clone();
                a.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
                a
            } else {
                z.clone()
            };
            pre_activations.push(z);
        }
        let embeddings = current.normalize_rows()?;
        Ok((
            embeddings,
            ForwardCache {
                stamp: self.stamp,
                inputs,
                pre_activations,
            },
        ))
    }

    /// Forward pass without keeping a cache.
    pub fn embed(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        self.forward(batch).map(|(e, _)| e)
    }

    /// Parameter gradients given `dL/dv` for each embedding row, summed over
    /// the batch. Consumes the cache.
    pub fn backward(
        &self,
        cache: ForwardCache,
        grad_embeddings: &DenseMatrix,
    ) -> Result<ParamGradients> {
        if cache.stamp != self.stamp {
            return Err(Error::Contract(
                "forward cache was produced by different parameters".into(),
            ));
        }
        let m = cache.batch_size();
        if grad_embeddings.shape() != (m, self.output_dim()) {
            return Err(Error::Contract(format!(
                "embedding gradient is {}x{}, forward produced {}x{}",
                grad_embeddings.rows(),
                grad_embeddings.cols(),
                m,
                self.output_dim()
            )));
        }
        check_finite(grad_embeddings.data())?;

        let last = self.layers.len() - 1;
        let raw = &cache.pre_activations[last];
        let mut grad_z = DenseMatrix::zeros(m, self.output_dim());
        for i in 0..m {
            let g = l2_normalize_backward(raw.row(i), grad_embeddings.row(i))?;
            grad_z.row_mut(i).copy_from_slice(&g);
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &cache.inputs[k];
            let grad_w = grad_z.transpose().matmul(input)?;
            let mut grad_b = vec![0.0; layer.output_dim()];
            for row in grad_z.iter_rows() {
                for (b, g) in grad_b.iter_mut().zip(row) {
                    *b += g;
                }
            }
            grads.push((grad_w, grad_b));
            if k > 0 {
                let mut grad_a = grad_z.matmul(&layer.weight)?;
                let z_prev = &cache.pre_activations[k - 1];
                // rectifier subgradient is 0 at 0
                for (g, z) in grad_a.data_mut().iter_mut().zip(z_prev.data()) {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                }
                grad_z = grad_a;
            }
        }
        grads.reverse();
        let out = ParamGradients { layers: grads };
        for s in out.slices() {
            check_finite(s)?;
        }
        Ok(out)
    }
}

/// Single-sample convenience: the unit embedding of one feature vector.
pub fn embed_one(net: &EmbeddingNet, x: &[f64]) -> Result<Vec<f64>> {
    let batch = DenseMatrix::new(1, x.len(), x.to_vec())?;
    Ok(net.embed(&batch)?.row(0).to_vec())
}
