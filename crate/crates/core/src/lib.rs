//! Retrieval-augmented image captioning toolkit.
//!
//! The crate is organised around the data flow of a retrieval-augmented
//! captioner:
//!
//! * [`index`] stores unit-norm image embeddings and answers cosine k-NN
//!   queries, either by exact scan or through an inverted-file partition.
//! * [`retriever`] wraps an index with the duplicate filters applied at
//!   training time, plus the query-dropout and prefix-context baselines.
//! * [`corpus`] ingests embedding/metadata files, synthesizes deterministic
//!   stand-in embeddings, reports caption duplication and builds interleaved
//!   few-shot samples.
//! * [`model`] is a small from-scratch decoder with a perceiver resampler,
//!   tanh-gated visual cross-attention and cross-attention over encoded
//!   neighbor captions, trained with reverse-mode autodiff in `f64`.
//! * [`metrics`] implements corpus BLEU@4 and CIDEr-D.
//! * [`ablation`] ties everything together into the filtering and
//!   prefix-vs-cross-attention comparisons.

pub mod ablation;
mod binio;
pub mod corpus;
pub mod embedding;
pub mod fsutil;
pub mod index;
pub mod metrics;
pub mod model;
pub mod retriever;
pub mod seed;
pub mod text;

pub use corpus::{Corpus, CorpusError, DedupReport, InterleavedSample};
pub use embedding::{normalize, EmbeddingError, EmbeddingVector};
pub use index::{Index, IndexConfig, IndexError, IndexMode, ImageTextRecord, ScoredNeighbor};
pub use metrics::{bleu4, cider_d, EvalPair, MetricsError};
pub use model::{ModelConfig, ModelError, ModelParams};
pub use retriever::{FilterPolicy, RetrievalQuery, RetrievalResult};

/// Version string embedded in every artifact the toolkit writes.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
