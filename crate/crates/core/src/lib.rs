//! Class-wise visual-linguistic representation learning for long-tailed
//! recognition, small enough to run and verify on a laptop CPU.
//!
//! The pipeline has two stages. Stage one aligns a visual and a linguistic
//! encoder with a class-wise contrastive loss plus distillation from a frozen
//! teacher ([`cvlp`]). Stage two keeps the most discriminative sentences per
//! class as anchors ([`anss`]) and trains a language-guided recognition head
//! over them ([`lgr`]). [`evalkit`] reports overall and many/medium/few-shot
//! accuracy; [`pipeline`] wires the stages together with content-hashed
//! artifacts.
//!
//! Runnable walkthroughs live in `examples/`, one per capability.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anss;
pub mod config;
pub mod cvlp;
pub mod datasynth;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod hashing;
pub mod lgr;
pub mod numcore;
pub mod pipeline;

pub use error::{Error, Result};
