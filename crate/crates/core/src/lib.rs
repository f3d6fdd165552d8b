//! Metric-learning laboratory for speaker verification.
//!
//! The crate bundles six metric-learning objectives (plus two bias/hinge
//! variants) with hand-derived gradients, a small feedforward encoder trained
//! by plain SGD on synthetic speakers, and a verification back end with cosine
//! scoring, adaptive s-norm and equal error rate with bootstrap intervals.

pub mod embedding;
pub mod error;
pub mod losses;
pub mod sampling;
pub mod scoring;
pub mod trainer;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod experiment;

pub use embedding::{cosine_similarity, mean_embedding, normalize, Embedding, FileEmbedding, SpeakerId};
pub use error::{Error, Result};
