//! Training and evaluation toolkit for sentence-level syntactic embeddings.
//!
//! The pipeline learns a joint BPE vocabulary over source-language text,
//! trains a BiLSTM encoder / LSTM decoder to predict the UPOS sequence of a
//! translated sentence, and evaluates the pooled encoder outputs with
//! nearest-neighbour group accuracy and functional dissimilarity.

pub mod bpe;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod nncore;
pub mod synthgen;
pub mod trainer;

pub use error::CoreError;
