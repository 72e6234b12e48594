//! `index.rvi` serialization.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "RVLI" | version u32 | config json (u32 len + bytes)
//! count u64 | dim u32
//! count × { id u64 | image_uri (u32 len + bytes) | caption (u32 len + bytes) }
//! count × dim f32 embeddings, row-major
//! ivf flag u8 [ nlist u32 | nlist × dim f32 centroids | count × u32 assignments ]
//! crc32 u32 over every byte between the magic and the checksum
//! ```

use std::collections::HashMap;
use std::path::Path;

use super::{Index, IndexConfig, IndexError, IndexMode, IvfPartition, RecordMeta};
use crate::binio::{put_blob, put_f32s, put_u32, put_u64, ByteReader, Truncated};
use crate::fsutil::write_atomic;
use crate::text::normalize_caption;

pub const INDEX_MAGIC: &[u8; 4] = b"RVLI";
pub const INDEX_FORMAT_VERSION: u32 = 1;

impl From<Truncated> for IndexError {
    fn from(t: Truncated) -> Self {
        IndexError::Corrupt { offset: t.offset, detail: format!("truncated, wanted {} more bytes", t.wanted) }
    }
}

impl Index {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.embeddings.len() * 4 + self.meta.len() * 64);
        out.extend_from_slice(INDEX_MAGIC);
        put_u32(&mut out, INDEX_FORMAT_VERSION);
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        put_blob(&mut out, &cfg);
        put_u64(&mut out, self.meta.len() as u64);
        put_u32(&mut out, self.config.dim as u32);
        for m in &self.meta {
            put_u64(&mut out, m.id);
            put_blob(&mut out, m.image_uri.as_bytes());
            put_blob(&mut out, m.caption.as_bytes());
        }
        put_f32s(&mut out, &self.embeddings);
        match &self.ivf {
            None => out.push(0),
            Some(p) => {
                out.push(1);
                put_u32(&mut out, p.lists.len() as u32);
                put_f32s(&mut out, &p.centroids);
                for a in &p.assignments {
                    put_u32(&mut out, *a);
                }
            }
        }
        let crc = crc32fast::hash(&out[4..]);
        put_u32(&mut out, crc);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        if bytes.len() < 12 || &bytes[..4] != INDEX_MAGIC {
            return Err(IndexError::FormatVersionMismatch("bad magic, not an index file".into()));
        }
        let mut r = ByteReader::new(bytes);
        r.take(4)?;
        let version = r.u32()?;
        if version != INDEX_FORMAT_VERSION {
            return Err(IndexError::FormatVersionMismatch(format!(
                "index format version {version}, expected {INDEX_FORMAT_VERSION}"
            )));
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[4..body_end]);
        if stored != computed {
            return Err(IndexError::ChecksumMismatch { stored, computed });
        }
        let body = &bytes[..body_end];
        let mut r = ByteReader::new(body);
        r.take(8)?;

        let cfg_off = r.offset();
        let config: IndexConfig = serde_json::from_slice(r.blob()?)
            .map_err(|e| IndexError::Corrupt { offset: cfg_off, detail: format!("config: {e}") })?;
        let count = r.u64()? as usize;
        let dim = r.u32()? as usize;
        if dim != config.dim {
            return Err(IndexError::Corrupt {
                offset: r.offset() - 4,
                detail: format!("dim {dim} disagrees with config dim {}", config.dim),
            });
        }
        let mut meta = Vec::with_capacity(count.min(1 << 20));
        let mut by_id = HashMap::with_capacity(count.min(1 << 20));
        for row in 0..count {
            let id = r.u64()?;
            let uri = utf8(&mut r)?;
            let caption = utf8(&mut r)?;
            if by_id.insert(id, row).is_some() {
                return Err(IndexError::DuplicateId(id));
            }
            meta.push(RecordMeta { id, image_uri: uri, caption_norm: normalize_caption(&caption), caption });
        }
        let embeddings = r.f32s(count * dim)?;
        let flag_off = r.offset();
        let ivf = match r.u8()? {
            0 => None,
            1 => {
                let nlist = r.u32()? as usize;
                let centroids = r.f32s(nlist * dim)?;
                let mut assignments = Vec::with_capacity(count);
                for _ in 0..count {
                    let off = r.offset();
                    let a = r.u32()?;
                    if a as usize >= nlist {
                        return Err(IndexError::Corrupt { offset: off, detail: format!("cluster {a} >= nlist {nlist}") });
                    }
                    assignments.push(a);
                }
                Some(IvfPartition::from_assignments(centroids, assignments, nlist))
            }
            f => return Err(IndexError::Corrupt { offset: flag_off, detail: format!("bad ivf flag {f}") }),
        };
        if (config.mode == IndexMode::Ivf) != ivf.is_some() {
            return Err(IndexError::Corrupt { offset: flag_off, detail: "ivf section disagrees with mode".into() });
        }
        if r.remaining() != 0 {
            return Err(IndexError::Corrupt { offset: r.offset(), detail: "trailing bytes".into() });
        }
        Ok(Index { config, meta, embeddings, by_id, ivf })
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn utf8(r: &mut ByteReader<'_>) -> Result<String, IndexError> {
    let off = r.offset();
    let b = r.blob()?;
    String::from_utf8(b.to_vec()).map_err(|_| IndexError::Corrupt { offset: off, detail: "invalid utf-8".into() })
}
