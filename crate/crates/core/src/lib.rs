//! Hierarchical text classification as sequence generation: a text encoder
//! and an autoregressive decoder that emits symbolic label sequences,
//! deepest level first.

pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod inference;
pub mod label_codec;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod taxonomy;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::Classifier;
