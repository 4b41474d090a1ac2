//! Desk-scale toolkit for activation sparsity in gated-FFN transformers:
//! train tiny byte-level models, measure how many FFN neurons actually
//! contribute per token, calibrate truncation thresholds against a
//! perplexity budget, fit the activation-vs-data power laws, and benchmark
//! the sparse execution win.

pub mod analytics;
pub mod cli;
pub mod error;
pub mod lawfit;
pub mod mat;
pub mod model;
pub mod sparsity;
pub mod report;
pub mod sparse_exec;
pub mod splw;
pub mod textgen;
pub mod train;

pub use error::{Error, Result};
