//! Tiny causal language model: tokenizer, transformer, checkpoints.

pub mod checkpoint;
mod model;
mod vocab;


pub use model::{snippet_sequence, LmConfig, LmParams, LmVars};
pub use vocab::{TokenSeq, Vocabulary, BOS_TOKEN, EOS_TOKEN, PAD_TOKEN, UNK_TOKEN};
