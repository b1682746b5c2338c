//! Auxiliary mechanisms for video action classification with a small inflated
//! 3D residual network: skeleton-guided cropping, confusion-driven
//! hierarchical heads and iterative filter pruning.

// `!(x >= 0.0)` deliberately rejects NaN as well as negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod hierarchy;
pub mod io;
pub mod model;
pub mod preprocess;
pub mod pruning;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Training versus evaluation behaviour (augmentation, frame sampling, normalization).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Test,
}
