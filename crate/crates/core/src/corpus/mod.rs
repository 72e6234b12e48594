//! Corpus ingestion, synthetic embeddings, duplicate analysis and
//! interleaved few-shot sample construction.

mod dedup;
mod interleave;
mod manifest;
mod synth;
pub mod synthetic;

use std::collections::HashSet;

use thiserror::Error;

use crate::embedding::EmbeddingError;
use crate::index::ImageTextRecord;

pub use dedup::{duplicate_caption_ratio, DedupReport};
pub use interleave::{
    build_interleaved, normalized_distance, write_interleaved, CaptionEmbeddings, InterleaveConfig, InterleaveOutput,
    InterleavedSample, SamplePair,
};
pub use manifest::{
    ingest_manifest, read_embeddings_bin, write_embeddings_bin, write_manifest, MetadataLine, EMBEDDINGS_FORMAT_VERSION,
    EMBEDDINGS_MAGIC,
};
pub use synth::{synth_embed, SynthEmbedder, SYNTH_BUCKETS};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("format/version mismatch at byte offset {offset}: {detail}")]
    FormatVersionMismatch { offset: usize, detail: String },
    #[error("corrupt embeddings file at byte offset {offset}: {detail}")]
    Corrupt { offset: usize, detail: String },
    #[error("embeddings checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("row count mismatch: embeddings has {embeddings} rows, metadata has {metadata}")]
    RowCountMismatch { embeddings: usize, metadata: usize },
    #[error("non-finite embedding value in row {row}")]
    NonFiniteEmbedding { row: usize },
    #[error("row {row}: {source}")]
    BadEmbedding { row: usize, source: EmbeddingError },
    #[error("metadata line {line}: {detail}")]
    Metadata { line: usize, detail: String },
    #[error("duplicate record id {0}")]
    DuplicateId(u64),
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("caption embeddings are unavailable and synthetic captions are disabled")]
    MissingCaptionEmbeddings,
    #[error("invalid interleave parameters: {0}")]
    InvalidParameters(String),
}

impl CorpusError {
    /// True for errors caused by malformed input files.
    pub fn is_format_error(&self) -> bool {
        !matches!(self, CorpusError::Io(_) | CorpusError::InvalidParameters(_))
    }
}

/// An image-text corpus with unit-norm embeddings of one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub records: Vec<ImageTextRecord>,
    pub dim: usize,
}

impl Corpus {
    pub fn new(records: Vec<ImageTextRecord>) -> Result<Self, CorpusError> {
        let dim = records.first().map(|r| r.embedding.dim()).ok_or(CorpusError::EmptyCorpus)?;
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.embedding.dim() != dim {
                return Err(CorpusError::DimensionMismatch { expected: dim, found: r.embedding.dim() });
            }
            if !seen.insert(r.id) {
                return Err(CorpusError::DuplicateId(r.id));
            }
        }
        Ok(Self { records, dim })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
