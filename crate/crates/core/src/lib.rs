//! Hybrid sequence labeling: a dense LSTM branch and a compressed sparse
//! hand-built feature branch feeding a linear-chain CRF.

pub mod corpus;
pub mod crf;
pub mod crowd;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod featurizer;
pub mod lexicon;
pub mod model;
pub mod neural;
pub mod training;

pub use error::{Error, Result};
