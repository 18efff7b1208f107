//! Dense linear algebra and the embedding network.

mod matrix;
mod net;

pub use matrix::{dot, l2_normalize, l2_normalize_backward, norm_sq, DenseMatrix, MIN_NORM};
pub use net::{embed_one, EmbeddingNet, ForwardCache, Linear, ParamGradients};

pub(crate) use matrix::check_finite;
