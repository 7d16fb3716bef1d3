//! Story summarization from episode recaps.
//!
//! The crate covers the full pipeline on precomputed feature tensors:
//!
//! - [`labeling`]: matches recap shots back into the episode and turns the
//!   matches into soft importance labels (triangle smoothing, dialog
//!   inheritance).
//! - [`tensor`] / [`graph`] / [`nn`] / [`optim`]: a small dense-tensor
//!   reverse-mode autodiff engine with the layers the model needs, AdamW,
//!   and a one-cycle learning-rate schedule.
//! - [`model`]: the two-level importance-scoring transformer (shot/utterance
//!   encoders feeding an episode-level encoder with block-sparse attention
//!   and group tokens).
//! - [`metrics`]: average precision, rank correlations, agreement
//!   statistics, and budgeted summary selection.
//! - [`io`]: binary tensor files, episode manifests, label/score JSON,
//!   checkpoints, splits, and a synthetic-episode generator.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`). Training
//! and inference run in `f32` by default; `f64` exists for gradient
//! verification. Concrete aliases live at the crate root.

// Index loops in the numeric kernels intentionally mirror the math.
#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod labeling;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

use rand::SeedableRng;

/// The seeded generator used by every stochastic operation in the crate.
///
/// ChaCha8 keyed from a 64-bit seed: identical seeds give identical streams
/// on every platform and build.
pub type SeedRng = rand_chacha::ChaCha8Rng;

/// Create the crate-wide generator from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> SeedRng {
    SeedRng::seed_from_u64(seed)
}

/// Default-precision tensor used by the training pipeline.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor used by gradient checks.
pub type Tensor64 = Tensor<f64>;
/// Default-precision parameter.
pub type Parameter32 = graph::Parameter<f32>;
/// Default-precision model parameter set.
pub type ModelParams32 = model::ModelParams<f32>;
