//! Unified retrieve-read-rerank question answering.
//!
//! One shared transformer encoder serves three heads: an early-exit
//! retriever that scores segments after `J` blocks, a span reader on the
//! final hidden states, and a span reranker that reuses those same states.
//! The crate covers the whole path from raw instances to evaluated
//! predictions:
//!
//! * [`corpus`]: data model, JSONL I/O and the synthetic generator.
//! * [`preprocess`]: paragraph merging, TF-IDF pruning, windowing, labels.
//! * [`encoder`]: embeddings, transformer blocks, backward pass, checkpoints.
//! * [`heads`]: retriever, reader, span NMS and reranker.
//! * [`train`]: losses, Adam and the end-to-end epoch loop.
//! * [`inference`]: prediction, metrics and the block-pass benchmark.

pub mod corpus;
pub mod encoder;
mod error;
pub mod heads;
pub mod inference;
pub mod preprocess;
mod real;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
