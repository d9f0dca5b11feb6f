// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy decoder-only transformer, synthetic task corpora and LM training.

pub mod config;
pub mod corpus;
pub mod model;
pub mod train;
pub mod vocab;

pub use config::ModelConfig;
pub use corpus::{Corpus, Family, MixtureWeights, TokenSequence};
pub use model::{ActivationCache, HookPoint, LayerCache, Transformer};
pub use train::{train_lm, LmTrainConfig, LmTrainReport};
pub use vocab::Vocabulary;
