//! Generative sequential retrieval at desk scale: synthetic batch-exposure
//! logs, time-aware multi-item pre-training, condition-guided fine-tuning,
//! exact inner-product evaluation, and batched multi-condition serving.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod mask;
pub mod model;
pub mod serve;
pub mod synth;
pub mod tensor;
pub mod train;

pub use cli::cli_main;
pub use error::{Error, Result};
