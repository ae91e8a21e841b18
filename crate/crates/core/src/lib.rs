//! Synthetic diesel-engine fault corpora, preprocessing into fixed-length
//! 27-channel sequences, and transformer / stacked-RNN fault classifiers
//! trained with a small reverse-mode autodiff core.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dataset;
pub mod error;
pub mod models;
pub mod nn;
pub mod par;
pub mod preprocess;
pub mod testbed_sim;
pub mod train_eval;

pub use error::{Error, Result};

/// Number of merged input channels per timestep.
pub const NUM_CHANNELS: usize = 27;
/// Fault-free class plus eleven fault types.
pub const NUM_CLASSES: usize = 12;
