//! Evaluation harness for deep edits of language-model knowledge.

pub mod dataset;
pub mod eval;
pub mod fixtures;
pub mod kg;
pub mod metrics;
pub mod pipeline;
pub mod probe;
pub mod review;
