//! Learning a classifier from noisy, open-ended labels attached to a small
//! set of embeddings.
//!
//! The pipeline builds per-image candidate label sets from nearest neighbors,
//! splits the training set into clean and noisy parts with a two-component
//! Gaussian mixture over per-sample losses, trains an embedding-space softmax
//! classifier on refined targets, and finally filters the label space used at
//! inference. Evaluation is vocabulary-free: clustering accuracy via optimal
//! assignment and semantic accuracy via label-embedding cosine.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod cli;
pub mod data;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod mixture;
pub mod neighbors;
pub mod refine;
pub mod synth;
pub mod trainer;

pub use error::{NearError, Result};
