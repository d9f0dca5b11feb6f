// SPDX-License-Identifier: MIT OR Apache-2.0

//! Circuit discovery on small transformers through sparse dictionaries.
//!
//! The pipeline trains a toy decoder-only transformer on synthetic tasks,
//! fits sparse autoencoders and transcoders to its activations, rewrites a
//! single forward pass into an exact linear computation graph over dictionary
//! features, and isolates circuits with hierarchical attribution.
//!
//! - [`numerics`]: tensors, reverse-mode tape, Adam, tensor archives.
//! - [`toymodel`]: the transformer, task corpora and LM training.
//! - [`dictionary`]: SAE / transcoder training, pruning, finetuning, metrics.
//! - [`lingraph`]: linear computation graph construction and verification.
//! - [`attribution`]: attribution scores, hierarchical attribution, sweeps,
//!   QK decomposition and the direct-contribution engine.

pub mod error;
pub mod numerics;
pub mod toymodel;
pub mod dictionary;
pub mod lingraph;
pub mod attribution;

pub use error::{Error, Result};
