//! Desk-scale pretraining lab for replaced-token detection.
//!
//! A generator proposes replacements for masked tokens and a discriminator
//! learns to spot them. On top of that baseline this crate implements
//! loss-aware replacement sampling (two head variants: loss regression and
//! direct distribution learning), focal-loss smoothing of the MLM objective,
//! and the analysis tooling to verify the sampling math — including the
//! zero-variance importance-sampling oracle — at sizes that fit on a desk.
//!
//! Everything runs on a small f64 tensor engine with reverse-mode autodiff
//! (`tensor`), built for bit-reproducible runs rather than throughput.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod testing;
pub mod train;

pub use error::{Error, Result};
pub use rng::{RngState, Stream};
pub use tensor::{Graph, Gradients, ParamSet, Precision, Tensor};
