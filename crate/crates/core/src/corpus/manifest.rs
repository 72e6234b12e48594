//! `embeddings.bin` + `metadata.jsonl` reader and writer.
//!
//! `embeddings.bin`: magic `RVLM`, format version u32 (1), row count u64,
//! dim u32, `count × dim` f32 row-major, then the CRC32 of the f32 payload.
//! All little-endian. Row `i` pairs with line `i` of `metadata.jsonl`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError};
use crate::binio::{put_f32s, put_u32, put_u64, ByteReader, Truncated};
use crate::embedding::{normalize, EmbeddingError};
use crate::fsutil::{write_atomic, write_atomic_with};
use crate::index::ImageTextRecord;

pub const EMBEDDINGS_MAGIC: &[u8; 4] = b"RVLM";
pub const EMBEDDINGS_FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataLine {
    pub id: u64,
    pub image_uri: String,
    pub caption: String,
}

impl From<Truncated> for CorpusError {
    fn from(t: Truncated) -> Self {
        CorpusError::Corrupt { offset: t.offset, detail: format!("truncated, wanted {} more bytes", t.wanted) }
    }
}

/// Parses an `embeddings.bin` buffer into `(dim, rows)`. Values are returned
/// as stored; nothing is normalized here.
pub fn read_embeddings_bin(bytes: &[u8]) -> Result<(usize, Vec<Vec<f32>>), CorpusError> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4).map_err(|_| CorpusError::FormatVersionMismatch {
        offset: 0,
        detail: "file shorter than the 4-byte magic".into(),
    })?;
    if magic != EMBEDDINGS_MAGIC {
        return Err(CorpusError::FormatVersionMismatch { offset: 0, detail: format!("bad magic {magic:02x?}") });
    }
    let version = r.u32()?;
    if version != EMBEDDINGS_FORMAT_VERSION {
        return Err(CorpusError::FormatVersionMismatch {
            offset: 4,
            detail: format!("format version {version}, expected {EMBEDDINGS_FORMAT_VERSION}"),
        });
    }
    let count = r.u64()? as usize;
    let dim = r.u32()? as usize;
    if dim < 2 {
        return Err(CorpusError::Corrupt { offset: 16, detail: format!("dim {dim} < 2") });
    }
    let payload_len = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or(CorpusError::Corrupt { offset: 8, detail: "row count overflows".into() })?;
    let expected_len = HEADER_LEN + payload_len + 4;
    if bytes.len() != expected_len {
        let offset = bytes.len().min(expected_len);
        return Err(CorpusError::Corrupt {
            offset,
            detail: format!("file is {} bytes, header implies {expected_len}", bytes.len()),
        });
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + payload_len];
    let stored = u32::from_le_bytes(bytes[HEADER_LEN + payload_len..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CorpusError::ChecksumMismatch { stored, computed });
    }
    let values = r.f32s(count * dim)?;
    Ok((dim, values.chunks_exact(dim).map(<[f32]>::to_vec).collect()))
}

pub fn encode_embeddings_bin(dim: usize, rows: &[&[f32]]) -> Vec<u8> {
    let mut payload = Vec::with_capacity(rows.len() * dim * 4);
    for row in rows {
        assert_eq!(row.len(), dim, "row length must equal dim");
        put_f32s(&mut payload, row);
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
    out.extend_from_slice(EMBEDDINGS_MAGIC);
    put_u32(&mut out, EMBEDDINGS_FORMAT_VERSION);
    put_u64(&mut out, rows.len() as u64);
    put_u32(&mut out, dim as u32);
    out.extend_from_slice(&payload);
    put_u32(&mut out, crc32fast::hash(&payload));
    out
}

pub fn write_embeddings_bin(path: &Path, dim: usize, rows: &[&[f32]]) -> std::io::Result<()> {
    write_atomic(path, &encode_embeddings_bin(dim, rows))
}

/// Writes a corpus as `embeddings.bin` + `metadata.jsonl`.
pub fn write_manifest(corpus: &Corpus, embeddings_path: &Path, metadata_path: &Path) -> std::io::Result<()> {
    let rows: Vec<&[f32]> = corpus.records.iter().map(|r| r.embedding.as_slice()).collect();
    write_embeddings_bin(embeddings_path, corpus.dim, &rows)?;
    write_atomic_with(metadata_path, |w| {
        for r in &corpus.records {
            let line = MetadataLine { id: r.id, image_uri: r.image_uri.clone(), caption: r.caption.clone() };
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

/// Reads and validates a corpus; embeddings are re-normalized on ingest.
pub fn ingest_manifest(embeddings_path: &Path, metadata_path: &Path) -> Result<Corpus, CorpusError> {
    let bytes = std::fs::read(embeddings_path)?;
    let (dim, rows) = read_embeddings_bin(&bytes)?;

    let reader = BufReader::new(std::fs::File::open(metadata_path)?);
    let mut lines = Vec::with_capacity(rows.len());
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: MetadataLine =
            serde_json::from_str(&line).map_err(|e| CorpusError::Metadata { line: i + 1, detail: e.to_string() })?;
        lines.push(m);
    }
    if lines.len() != rows.len() {
        return Err(CorpusError::RowCountMismatch { embeddings: rows.len(), metadata: lines.len() });
    }

    let mut records = Vec::with_capacity(rows.len());
    for (row, (values, meta)) in rows.into_iter().zip(lines).enumerate() {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CorpusError::NonFiniteEmbedding { row });
        }
        let embedding = normalize(&values).map_err(|source| match source {
            EmbeddingError::NonFinite(_) => CorpusError::NonFiniteEmbedding { row },
            source => CorpusError::BadEmbedding { row, source },
        })?;
        records.push(ImageTextRecord::new(meta.id, meta.image_uri, meta.caption, embedding));
    }
    let corpus = Corpus::new(records)?;
    debug_assert_eq!(corpus.dim, dim);
    Ok(corpus)
}
