//! Interleaved few-shot sample construction.
//!
//! For every query record:
//!
//! 1. keep the other records whose normalized image distance
//!    `‖e_q − e_r‖₂ / 2` lies inside the band (inclusive);
//! 2. rank those by caption-embedding cosine to the query caption and take
//!    the top `shots`.
//!
//! The band is widened by `widen_step` on both sides, up to `widen_limit`,
//! when too few records survive step 1. Queries that still fall short are
//! skipped.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, SynthEmbedder};
use crate::embedding::{dot, EmbeddingVector};
use crate::fsutil::write_atomic_with;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterleaveConfig {
    pub band_low: f64,
    pub band_high: f64,
    pub shots: usize,
    pub widen_step: f64,
    /// Maximum total widening applied to each side of the band.
    pub widen_limit: f64,
}

impl Default for InterleaveConfig {
    fn default() -> Self {
        Self { band_low: 0.4, band_high: 0.6, shots: 4, widen_step: 0.05, widen_limit: 0.2 }
    }
}

impl InterleaveConfig {
    fn validate(&self) -> Result<(), CorpusError> {
        let ok = (0.0..=1.0).contains(&self.band_low)
            && (0.0..=1.0).contains(&self.band_high)
            && self.band_low < self.band_high
            && self.shots >= 1
            && self.widen_step >= 0.0
            && self.widen_limit >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(CorpusError::InvalidParameters(format!("{self:?}")))
        }
    }

    /// Bands tried in order: the configured one, then each widening.
    pub fn band_schedule(&self) -> Vec<(f64, f64)> {
        let mut out = vec![(self.band_low, self.band_high)];
        if self.widen_step <= 0.0 || self.widen_limit <= 0.0 {
            return out;
        }
        let mut i = 1u32;
        loop {
            let w = (self.widen_step * f64::from(i)).min(self.widen_limit);
            out.push(((self.band_low - w).max(0.0), (self.band_high + w).min(1.0)));
            if w >= self.widen_limit {
                break;
            }
            i += 1;
        }
        out
    }
}

/// Where Step-2 gets caption vectors from.
#[derive(Debug, Clone, Copy)]
pub enum CaptionEmbeddings<'a> {
    /// One vector per corpus record, same order.
    Supplied(&'a [EmbeddingVector]),
    Synthetic { dim: usize, seed: u64 },
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePair {
    pub id: u64,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterleavedSample {
    pub band_used: (f64, f64),
    pub shots: Vec<SamplePair>,
    pub query: SamplePair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterleaveOutput {
    pub samples: Vec<InterleavedSample>,
    pub skipped: Vec<u64>,
}

/// `‖a − b‖₂ / 2` for unit vectors.
pub fn normalized_distance(a: &[f32], b: &[f32]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2)).sum();
    sq.sqrt() / 2.0
}

pub fn build_interleaved(
    corpus: &Corpus,
    config: &InterleaveConfig,
    captions: CaptionEmbeddings<'_>,
) -> Result<InterleaveOutput, CorpusError> {
    config.validate()?;
    let caption_vecs: Vec<EmbeddingVector> = match captions {
        CaptionEmbeddings::Supplied(v) => {
            if v.len() != corpus.len() {
                return Err(CorpusError::RowCountMismatch { embeddings: v.len(), metadata: corpus.len() });
            }
            v.to_vec()
        }
        CaptionEmbeddings::Synthetic { dim, seed } => {
            let e = SynthEmbedder::new(dim, seed);
            corpus.records.iter().map(|r| e.embed(&r.caption)).collect()
        }
        CaptionEmbeddings::Disabled => return Err(CorpusError::MissingCaptionEmbeddings),
    };
    let bands = config.band_schedule();

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by_key(|i| corpus.records[*i].id);

    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for &q in &order {
        let query = &corpus.records[q];
        let dists: Vec<(usize, f64)> = (0..corpus.len())
            .filter(|r| *r != q)
            .map(|r| (r, normalized_distance(query.embedding.as_slice(), corpus.records[r].embedding.as_slice())))
            .collect();

        let mut emitted = false;
        for &(lo, hi) in &bands {
            let mut survivors: Vec<(f64, u64, usize)> = dists
                .iter()
                .filter(|(_, d)| *d >= lo && *d <= hi)
                .map(|(r, _)| {
                    let sim = dot(caption_vecs[q].as_slice(), caption_vecs[*r].as_slice());
                    (sim, corpus.records[*r].id, *r)
                })
                .collect();
            if survivors.len() < config.shots {
                continue;
            }
            survivors.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let shots = survivors[..config.shots]
                .iter()
                .map(|(_, _, r)| SamplePair { id: corpus.records[*r].id, caption: corpus.records[*r].caption.clone() })
                .collect();
            samples.push(InterleavedSample {
                band_used: (lo, hi),
                shots,
                query: SamplePair { id: query.id, caption: query.caption.clone() },
            });
            emitted = true;
            break;
        }
        if !emitted {
            log::warn!("interleave: query {} skipped, fewer than {} records in widest band", query.id, config.shots);
            skipped.push(query.id);
        }
    }
    Ok(InterleaveOutput { samples, skipped })
}

pub fn write_interleaved(path: &Path, samples: &[InterleavedSample]) -> std::io::Result<()> {
    write_atomic_with(path, |w| {
        for s in samples {
            serde_json::to_writer(&mut *w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}
