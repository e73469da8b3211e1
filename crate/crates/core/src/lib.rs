//! Kernel-based self-training for attribute-controllable text generation.
//!
//! The crate bundles everything needed to run the method end to end on
//! synthetic corpora with a known generative process: a whitespace
//! tokenizer, a small shared transformer with autoregressive, masked
//! (non-autoregressive) and classification branches, the joint and kernel
//! (MMD) training objectives, decoding, the self-training loop with its
//! baselines, evaluation metrics and an experiment runner.

pub mod autograd;
pub mod corpus;
pub mod decode;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod rng;
pub mod runner;
pub mod selftrain;
pub mod tensor;
pub mod tokenizer;

pub use error::{KestError, Result};
pub use tensor::{Mat, Scalar};
