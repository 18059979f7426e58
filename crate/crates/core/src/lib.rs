//! Allocation-only core of the `aacap` audio captioning stack.
//!
//! Everything here is pure computation over in-memory values: tensor math with
//! hand-written gradients, the log-mel frontend, the captioner (audio encoder,
//! 5x downsampling projector, prefix-conditioned decoder with LoRA on the
//! query/value projections), the contrastive audio-text model used for
//! reranking, optimizers and schedules, decoding strategies, paraphrase
//! augmentation and the caption metric suite.
//!
//! File formats, the HTTP translation client and the command line live in the
//! `aacap` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod augment;
pub mod captioner;
pub mod clap;
pub mod dataset;
pub mod decoding;
mod error;
pub mod frontend;
pub mod gradcheck;
pub(crate) mod math;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
