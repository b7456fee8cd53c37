//! Capsule networks with dynamic routing, gradient-weighted shrinkage
//! pruning, and parse-tree entropy analysis.
//!
//! The crate is organized around the training-and-measurement pipeline:
//!
//! - [`tensor`] / [`ops`] — dense `f64` tensors, the forward operations a
//!   capsule network needs, and their hand-written backward passes
//! - [`routing`] / [`model`] — dynamic routing-by-agreement and the
//!   encoder (conv stem, primary capsules, output capsules, margin loss)
//! - [`optim`] — the shrinkage update rule, threshold masking, sparsity
//! - [`analysis`] — coupling quantization, per-class parse dictionaries,
//!   conditional entropy, cluster overlays
//! - [`data`] — IDX ingestion, shift augmentation, synthetic shapes
//! - [`checkpoint`] / [`config`] / [`trainer`] / [`commands`] — the
//!   experiment pipeline behind the `remcaps` CLI

pub mod analysis;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pgm;
pub mod routing;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{CapsNet, CapsNetConfig, CapsNetParams, RoutingTrace};
pub use routing::RoutingBackprop;
pub use tensor::Tensor;
