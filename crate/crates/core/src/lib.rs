//! Retrieval-augmented knowledge tracing over a multi-source knowledge base.

pub mod canonical;
pub mod config;
pub mod domain;
pub mod error;
pub mod eval;
pub mod graph;
pub mod ingest;
pub mod irt;
pub mod predictor;
pub mod prompt;
pub mod repository;
pub mod retrieval;
pub mod simulator;

pub use domain::{ConfConfig, Dimension, DimensionKind, Interaction, Level, PerfTuple};
pub use error::{Error, ErrorClass, Result};
