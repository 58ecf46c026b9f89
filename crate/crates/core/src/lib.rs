//! Epitope-conditioned T-cell receptor generation.
//!
//! - [`seqdata`]: vocabulary, datasets, splits, negatives, mask candidates
//! - [`nn`]: tensors, reverse-mode autograd, layers, AdamW, checkpoints
//! - [`bert`]: time-conditioned masked epitope encoder
//! - [`gpt`]: causal CDR3 decoder with RoPE, GEGLU and epitope conditioning
//! - [`assembler`]: V/J gene prediction and full-length chain generation
//! - [`metrics`]: repertoire diversity and sequence similarity metrics

pub mod assembler;
pub mod bert;
pub mod error;
pub mod gpt;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod seqdata;

pub use error::{Error, Result};
