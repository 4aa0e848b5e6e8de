//! Aligned query expansion over a BM25 retriever.
//!
//! The pipeline: generate candidate expansions with a small sequence model,
//! label each by the rank it gives the gold document, build best/worst pairs,
//! and align the model on them with RSFT and DPO so a single greedy expansion
//! retrieves well. A generate-then-rerank baseline and the evaluation harness
//! live alongside.

pub mod alignment;
pub mod data;
pub mod error;
pub mod eval;
pub mod expansion;
pub mod filtering;
pub mod persist;
pub mod pipeline;
pub mod report;
pub mod retrieval;
pub mod seed;
pub mod seqmodel;
pub mod tensor;

pub use error::{Error, Result};
