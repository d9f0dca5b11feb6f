// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense tensor math, a reverse-mode tape, Adam, and the tensor archive format.

pub mod adam;
pub mod archive;
pub mod kernels;
pub mod seeds;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use archive::TensorArchive;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
