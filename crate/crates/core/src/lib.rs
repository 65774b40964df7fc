//! Laboratory for target-side length overfitting in sequence-to-sequence
//! Transformers.
//!
//! - [`taskgen`]: binary string-editing benchmarks split into length buckets
//! - [`corpus`]: bucketing, concatenation augmentation, bucket labels, BPE
//! - [`model`]: a small encoder-decoder Transformer with exact gradients and Adam
//! - [`decode`]: greedy and length-penalized beam search
//! - [`eval`]: accuracy, BLEU, length ratios, bootstrap intervals
//! - [`runner`]: experiment grids and their CSV reports

pub mod corpus;
pub mod decode;
pub mod eval;
pub mod model;
pub mod runner;
pub mod seed;
pub mod taskgen;

pub use taskgen::BucketRange;
