//! Direct preference knowledge distillation over tabular autoregressive
//! sequence models.
//!
//! Everything here is exact: the models are order-k logits tables, so
//! sequence distributions, KL divergences, partition functions, and
//! closed-form optimal policies are all computable by enumeration. The
//! training objectives (preference loss, word-level KD, sequence KD,
//! reverse-KLD) and their gradients are checked against brute-force
//! oracles rather than trusted.
//!
//! Core math is generic over the scalar type (see [`num::Scalar`]);
//! concrete `f64` aliases live at the crate root and are what the trainer
//! and CLI use.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradients;
pub mod num;
pub mod objectives;
pub mod oracles;
pub mod seqmodel;
pub mod trainer;

pub use error::{Error, Result};

/// Default 64-bit model, used by the trainer and CLI.
pub type SeqModel64 = seqmodel::SeqModel<f64>;
/// 32-bit model alias for callers that trade precision for footprint.
pub type SeqModel32 = seqmodel::SeqModel<f32>;
pub type GradTable64 = gradients::GradTable<f64>;
pub type DpkdConfig64 = objectives::DpkdConfig<f64>;
