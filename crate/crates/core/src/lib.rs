//! Inference-time low-rank personalization of a flow-matching speech
//! synthesizer, at desk scale.
//!
//! The crate carries its own reverse-mode differentiation over small dense
//! matrices, a vector-field transformer, low-rank adapters, flow-matching
//! training and sampling, CTC alignment, a synthetic speaker corpus with a
//! known ground truth, and the evaluation harness.

pub mod align;
pub mod archive;
pub mod autodiff;
pub mod cfm;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod lora;
pub mod lorp;
pub mod net;
pub mod seed;
pub mod system;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Matrix;
