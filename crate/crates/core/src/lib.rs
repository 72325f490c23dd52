//! Mamba Hawkes processes: neural temporal point process models whose
//! encoder is a selective state-space model driven by the gaps between
//! events.
//!
//! - [`tensor`]: `f64` tensors and a tape-based reverse-mode autodiff graph.
//! - [`ssm`]: zero-order-hold discretization, the selective scan and the
//!   Mamba block.
//! - [`attention`]: causal self-attention blocks for the hybrid model.
//! - [`model`]: the MHP and MHP-E models, intensities, likelihoods and losses.
//! - [`data`], [`synth`]: event sequences, JSONL I/O, batching and a Hawkes
//!   simulator.
//! - [`train`], [`checkpoint`], [`cli`]: training, evaluation and the `mhp`
//!   binary.
//!
//! The guide in `book/` walks through each piece with runnable examples.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod nn;
pub mod model;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod fd;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/events.md")]
    mod events {}
    #[doc = include_str!("../../../book/src/selective-scan.md")]
    mod selective_scan {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
}
