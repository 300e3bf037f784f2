//! Concept-level steering laboratory for autoregressive transformers.
//!
//! The crate bundles a miniature gated-MLP transformer with tap sites and
//! activation hooks ([`model`]), static neuron attribution through the LM head
//! ([`attribution`]), clustered steering vectors with per-layer probes and
//! gradient refinement ([`steering`]), the measurement protocol
//! ([`evaluation`]), problem corpora and templates ([`corpus`]) and the ATRC
//! activation-trace format ([`trace`]).

pub mod attribution;
pub mod container;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod model;
pub mod seed;
pub mod steering;
pub mod tokenizer;
pub mod trace;

pub use error::{Error, Result};
