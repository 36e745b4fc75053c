//! Sequence tagger: subword transformer encoder, first-subtoken pooling, a
//! word-level transformer or Bi-LSTM layer, and a BIO-constrained linear-chain
//! CRF, with the training, evaluation and file-format tooling around it.

// Index loops mirror the recurrences they implement.
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod crf;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod synthetic;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Execution;
