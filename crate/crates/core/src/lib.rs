//! Deterministic federated-learning simulator and normalization-layer lab.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`nn`], [`norm`], [`model`]: a small neural-network core with
//!   explicit forward and backward passes (dense, conv, ReLU, batch/group norm).
//! - [`gradcheck`]: central finite differences used to verify every backward.
//! - [`data`], [`partition`]: datasets, synthetic blobs, IID/Dirichlet/Shards splits.
//! - [`fed`], [`policy`]: the FedAvg engine, FixBN two-stage schedule and
//!   momentum regimes.
//! - [`diagnostics`]: per-round statistics and the metrics CSV.
//! - [`config`], [`model_io`], [`experiment`]: experiment files, model files
//!   and the commands behind the `fedbn` binary.

pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod gradcheck;
pub mod model;
pub mod model_io;
pub mod nn;
pub mod norm;
pub mod partition;
pub mod policy;
pub mod seed;
pub mod tensor;

pub use error::{Error, ErrorCategory, Result};
pub use tensor::Tensor;
