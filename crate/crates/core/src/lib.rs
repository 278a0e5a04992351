//! A desk-scale laboratory for learned sparse retrieval.
//!
//! The pipeline: ingest a corpus and train a word-level vocabulary
//! ([`corpus`]), restrict or extend the encoder's output dimensions with a
//! vocabulary controller ([`vocab`]), train a toy SPLADE encoder with a
//! contrastive + FLOPS objective ([`encoder`], [`train`]), build an
//! impact-quantized inverted index ([`index`]), retrieve ([`search`]) and
//! evaluate ([`eval`]).

pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod pipeline;
pub mod search;
pub mod synth;
pub mod train;
pub mod vocab;

pub use error::{LabError, Result};
