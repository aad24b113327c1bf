//! Relational transaction categorization at desk scale.

pub mod autodiff;
pub mod cascade;
pub mod encoder;
pub mod config;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod tensor;

pub mod gnn;
pub mod graph;
pub mod sampler;
pub mod store;
pub mod synth;
pub mod tokenizer;
pub mod weights;

pub use error::{Error, Result};
