//! Learned compression for dense embedding tensors.
//!
//! The crate trains an encoder together with a fully factorized entropy model
//! under a rate–distortion objective, quantises the resulting embeddings, and
//! range-codes them against integer tables derived from the learned density.
//! Two baselines sit alongside: affinely quantised embeddings packed by a
//! generic byte coder, and generically compressed raw inputs.
//!
//! Module map:
//!
//! * [`numerics`]: tensors, kernels, finite-difference gradient oracle, `TNSR` files
//! * [`entropy`]: the per-channel density, its rate and gradients, coder tables
//! * [`quantizer`]: noise proxy, rounding, affine quantisation
//! * [`codec`]: range coder, byte-level baseline coder, archive container
//! * [`mae`]: the masked autoencoder and its compression-aware training
//! * [`bench`]: probes, the three pipelines, and rate–accuracy sweeps

pub mod bench;
pub mod codec;
pub mod entropy;
mod error;
pub mod mae;
pub mod numerics;
pub mod optim;
pub mod quantizer;

pub use error::{Error, Result};
