//! Reverse cross-entropy training and adversarial-input detection for small
//! image classifiers, built on a from-scratch f64 tensor engine.
//!
//! The crate trains small CNNs with plain cross-entropy, label smoothing, or
//! the reverse cross-entropy objective, attacks them with the usual
//! gradient-based suite (FGSM, BIM, ILCM, JSMA, C&W and variants), scores
//! inputs with confidence / non-maximal-entropy / kernel-density metrics
//! behind a NOT-SURE thresholding rule, and numerically verifies the softmax
//! decision-geometry facts the detection strategy relies on.
//!
//! Start with the runnable examples (`cargo run --release --example ...`)
//! or the `rcekit` binary, which exposes every stage as a subcommand.

pub mod attack;
pub mod cli;
pub mod data;
pub mod detect;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
pub use tensor::Tensor;
