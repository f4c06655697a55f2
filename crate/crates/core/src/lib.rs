//! Hierarchical mixture classifier with Gibbs-adapted group assignments.
//!
//! The model replaces a flat N-way softmax with a small stack of per-level
//! classifiers over a class hierarchy. Each level scores its groups, a
//! row-stochastic assignment matrix spreads group scores over leaf classes,
//! and a simplex weighting mixes the levels into one distribution. During
//! training the assignment matrices are periodically re-fit to the data with
//! a collapsed Gibbs sampler, which recovers classes that were placed in the
//! wrong group when the hierarchy was built.
//!
//! Crate layout:
//! - [`numerics`]: dense matrices, stable softmax, seeded RNG streams
//! - [`dataset`]: synthetic cluster data, CSV/binary formats, stratified split
//! - [`feature_net`]: small MLP feature extractor with manual backprop
//! - [`hierarchy`]: similarity-based agglomerative hierarchy over classes
//! - [`head`]: level classifiers, sparse assignment mixing, loss, gradients
//! - [`adaptation`]: collapsed Gibbs sweeps, assignment re-estimation, pruning
//! - [`trainer`]: the joint training loop, evaluation, metrics
//! - [`checkpoint`]: lossless JSON snapshots of full training state

pub mod adaptation;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod feature_net;
pub mod head;
pub mod hierarchy;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
