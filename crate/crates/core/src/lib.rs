//! Calibrated and explainable passage reranking.
//!
//! The crate is organized as a retrieval pipeline:
//!
//! - [`corpus`]: documents, queries, tokenization, synthetic data;
//! - [`retrieval`]: BM25 and log-tf·idf cosine over one inverted index;
//! - [`reranker`]: a small dropout classifier scoring `(query, context)`;
//! - [`calibration`]: deep/snapshot ensembles, weight averaging, MC dropout;
//! - [`explain`]: LIME, Kernel SHAP, exact Shapley values, feature-score
//!   reranking;
//! - [`fusion`]: context merging, Jensen–Shannon regularization, mutual
//!   information, an extractive reader;
//! - [`metrics`] and [`pipeline`]: evaluation and the end-to-end runner.

pub mod calibration;
pub mod corpus;
pub mod error;
pub mod explain;
pub mod fusion;
pub mod metrics;
pub mod pipeline;
pub mod prob;
pub mod reranker;
pub mod rng;
pub mod retrieval;
pub mod synth;

pub use error::{Error, Result};
pub use prob::ProbabilityDistribution;
