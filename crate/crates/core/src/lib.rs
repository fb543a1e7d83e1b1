//! Learning-free speculative decoding.
//!
//! Draft tokens come from N-grams derived from the base model itself (a
//! unigram over its embeddings, a bigram table and its greedy extension) and
//! from the context (earlier occurrences of the last `q` tokens). Drafts are
//! verified against the base model in one batched call per step, so the
//! output is always token-identical to greedy decoding. [`costmodel`]
//! estimates what each batched call costs on an accelerator.

pub mod context;
pub mod costmodel;
pub mod drafters;
pub mod engine;
pub mod error;
pub mod matrix;
pub mod model;
pub mod strategy;
pub mod vocab;

pub use error::{Error, Result};
pub use vocab::{TokenId, TokenSeq};
