//! Checkpoint files.
//!
//! ```text
//! magic "RVLC" | version u32 | model config json (u32 len + bytes)
//! step u64 | rng seed u64 | rng word position u128
//! 7 × frozen flag u8, in parameter-group order
//! tensor count u32 | count × { rows u32 | cols u32 | rows·cols f64 }
//! visual lift { rows u32 | cols u32 | rows·cols f64 }
//! crc32 u32 over every byte between the magic and the checksum
//! ```

use std::path::Path;

use super::params::ParamGroup;
use super::tensor::Tensor;
use super::{ModelConfig, ModelError, ModelParams};
use crate::binio::{put_blob, put_f64s, put_u32, put_u64, ByteReader, Truncated};
use crate::fsutil::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RVLC";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

impl From<Truncated> for ModelError {
    fn from(t: Truncated) -> Self {
        ModelError::Corrupt { offset: t.offset, detail: format!("truncated, wanted {} more bytes", t.wanted) }
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.rows as u32);
    put_u32(out, t.cols as u32);
    put_f64s(out, &t.data);
}

fn read_tensor(r: &mut ByteReader<'_>) -> Result<Tensor, ModelError> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let n = rows.checked_mul(cols).filter(|n| n * 8 <= r.remaining()).ok_or_else(|| ModelError::Corrupt {
        offset: r.offset(),
        detail: format!("tensor {rows}x{cols} larger than file"),
    })?;
    Ok(Tensor::from_vec(rows, cols, r.f64s(n)?))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::with_capacity(64 + p.scalar_count() * 8 + p.visual_lift.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_FORMAT_VERSION);
        put_blob(&mut out, &serde_json::to_vec(&p.config).expect("config serializes"));
        put_u64(&mut out, self.step);
        put_u64(&mut out, self.rng_seed);
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        for g in ParamGroup::ALL {
            out.push(u8::from(p.is_frozen(g)));
        }
        put_u32(&mut out, p.tensors.len() as u32);
        for t in &p.tensors {
            put_tensor(&mut out, t);
        }
        put_tensor(&mut out, &p.visual_lift);
        let crc = crc32fast::hash(&out[4..]);
        put_u32(&mut out, crc);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(ModelError::FormatVersionMismatch("bad magic, not a checkpoint".into()));
        }
        let body_end = bytes.len() - 4;
        let mut r = ByteReader::new(&bytes[..body_end]);
        r.take(4)?;
        let version = r.u32()?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(ModelError::FormatVersionMismatch(format!(
                "checkpoint format version {version}, expected {CHECKPOINT_FORMAT_VERSION}"
            )));
        }
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[4..body_end]);
        if stored != computed {
            return Err(ModelError::ChecksumMismatch { stored, computed });
        }
        let cfg_at = r.offset();
        let config: ModelConfig = serde_json::from_slice(r.blob()?)
            .map_err(|e| ModelError::Corrupt { offset: cfg_at, detail: format!("config: {e}") })?;
        let step = r.u64()?;
        let rng_seed = r.u64()?;
        let rng_word_pos = r.u128()?;
        let mut frozen = [false; 7];
        for f in &mut frozen {
            *f = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(ModelError::Corrupt { offset: r.offset() - 1, detail: format!("frozen flag {b}") }),
            };
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            tensors.push(read_tensor(&mut r)?);
        }
        let visual_lift = read_tensor(&mut r)?;
        if r.remaining() != 0 {
            return Err(ModelError::Corrupt { offset: r.offset(), detail: "trailing bytes".into() });
        }
        let params = ModelParams::from_parts(&config, tensors, visual_lift, frozen)?;
        Ok(Self { params, step, rng_seed, rng_word_pos })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ModelError> {
    write_atomic(path, &ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FreezePolicy;

    fn ckpt() -> Checkpoint {
        let mut params = ModelParams::init(&ModelConfig::small()).unwrap();
        params.apply_policy(FreezePolicy::Pretrain);
        params.set_gates(0.25);
        Checkpoint { params, step: 17, rng_seed: 3, rng_word_pos: 1 << 70 }
    }

    #[test]
    fn round_trip_is_bitwise_stable() {
        let c = ckpt();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = ckpt().to_bytes();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(ModelError::FormatVersionMismatch(_))));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(ModelError::ChecksumMismatch { .. })));
    }

    #[test]
    fn truncated_file_rejected() {
        let bytes = ckpt().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() / 3]).unwrap_err();
        assert!(err.is_format_error(), "{err}");
    }
}
