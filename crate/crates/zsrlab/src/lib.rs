//! Desk-scale laboratory for studying zero-shot adversarial robustness of
//! dual-encoder (image/text) classifiers: a tiny vision transformer with
//! reverse-mode autodiff, contrastive training objectives, L∞ PGD attacks,
//! adaptation methods (finetuning, linear probe, visual prompts), and
//! zero-shot evaluation on held-out class sets.

pub mod attacks;
pub mod data;
pub mod cli;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
