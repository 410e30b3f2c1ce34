//! Semantic identifiers and generative recommendation on one small
//! decoder-only transformer.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod cluster;
pub mod codetree;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod recommender;
pub mod tensor;
pub mod tokenizer;
pub mod vocab;

pub use error::{Error, Result};
