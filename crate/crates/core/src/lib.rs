//! Variational autoencoder with self-supervised intervention episodes,
//! prototypical pair objectives and a latent adversary, plus the
//! disentanglement metric suite and figure-artifact emitters that evaluate
//! it.
//!
//! Module map:
//! - [`data`]: ground-truth factor datasets (procedural sprites, `.npz`
//!   archives) with mixed-radix factor indexing.
//! - [`nn`]: scalar-generic layer kit (dense, strided conv, transposed
//!   conv) with explicit forward caches and hand-derived backward passes.
//! - [`vae`]: convolutional encoder/decoder, reparameterization, ELBO.
//! - [`episodes`]: latent intervention episode construction (support /
//!   query sets, labels, isometry targets).
//! - [`protonet`]: pair-embedding network, prototype losses (uniqueness,
//!   consistency) and the isometry regression head.
//! - [`adversary`]: latent discriminator and the encoder's adversarial
//!   objective.
//! - [`trainer`]: composite objective, Adam, training loop, checkpoints.
//! - [`metrics`]: factor-prediction, mutual-information-gap and
//!   modularity/compactness/explicitness evaluation of trained encoders.
//! - [`artifacts`]: latent traversal grids and pair-embedding exports.
//! - [`gradcheck`]: central-difference verification of every backward pass.
//! - [`cli`]: the `protovae` command-line front end.

pub mod adversary;
pub mod artifacts;
pub mod cli;
pub mod data;
pub mod episodes;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod protonet;
pub mod rng;
pub mod trainer;
pub mod vae;

pub use error::{Error, Result};
pub use nn::scalar::Scalar;
