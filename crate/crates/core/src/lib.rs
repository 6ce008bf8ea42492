//! Zero-shot relation triplet extraction.
//!
//! Each sentence is paired with every candidate relation text and encoded
//! jointly. A selector keeps the candidates that hold, and a set-prediction
//! decoder finds head and tail entity boundaries for every kept relation.

pub mod augment;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod infer;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod selector;
pub mod synth;
pub mod tape;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use parallel::Execution;
