//! Similarity contrastive estimation (SCE) and its InfoNCE and relational
//! baselines on a shared online/momentum siamese architecture.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and a tape-based reverse-mode autodiff engine.
//! - [`models`]: convolutional encoder, projector and linear classifier.
//! - [`augment`]: weak and strong stochastic view generation.
//! - [`objectives`]: InfoNCE, relational, SCE and ceiling losses plus the
//!   decomposition verifier.
//! - [`schedule`]: SGD and the learning-rate / EMA-momentum schedules.
//! - [`engine`]: memory queue, EMA target updates and the training loop.
//! - [`eval`]: linear probe, similarity histograms, sharpening analysis.
//! - [`data`], [`checkpoint`], [`config`], [`metrics`]: I/O.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod par;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
