//! Cross-batch memory (XBM) for pair-based deep metric learning.
//!
//! The crate is a small, CPU-only, 64-bit metric learning engine:
//!
//! - [`tensor`]: dense matrices and a hand-differentiated feed-forward
//!   embedding network whose last layer projects onto the unit sphere.
//! - [`losses`]: pair similarity matrices and the pair-weighting view of
//!   contrastive, triplet and multi-similarity losses.
//! - [`memory`]: the cross-batch memory queue, memory-augmented loss and
//!   valid-negative statistics.
//! - [`drift`]: feature drift measurement and the stale-embedding gradient
//!   error check.
//! - [`train`]: PK sampling, Adam, and the warm-up + memory training loop.
//! - [`eval`]: Recall@K and hard-mining reports.
//! - [`data`]: synthetic clusters, delimited-text datasets and binary
//!   matrix / checkpoint / snapshot persistence.
//! - [`config`] and [`cli`]: run files and the `xbm` command line.
//!
//! Runnable walkthroughs for each capability live in `examples/`.

pub mod cli;
pub mod config;
pub mod data;
pub mod drift;
pub mod error;
pub mod eval;
pub mod losses;
pub mod memory;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Class label of a training instance.
pub type Label = u32;
