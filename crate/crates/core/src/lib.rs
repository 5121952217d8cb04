//! Decoder-only speech-to-text translation on a synthetic corpus.

pub mod ablate;
pub mod bleu;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
mod error;
pub mod eval;
pub mod gradsuite;
pub mod infer;
pub mod model;
pub mod nn;
pub mod optim;
pub mod peft;
pub mod taskfmt;
pub mod train;

pub use error::{Error, Result};
