//! Generative sequential recommendation: item tokenization into semantic
//! IDs, a factorized temporal/depth autoregressive recommender, an ID-based
//! transformer baseline, evaluation and cost benchmarks.

pub mod bench;
pub mod cosette;
pub mod data;
pub mod error;
pub mod eval;
pub mod kmeans;
pub mod marius;
pub mod sasrecpp;
pub mod seed;

pub use error::{Error, Result};
