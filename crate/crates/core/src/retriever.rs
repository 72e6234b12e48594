//! Filtered neighbor retrieval on top of [`Index`].
//!
//! During training the query image `I` and its teacher-forced caption `C`
//! are known, and any retrieved pair with `i_j == I` or `c_j == C` is
//! discarded before the top `k` are taken. At inference only the image
//! identity (if any) is available.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingVector;
use crate::fsutil::write_atomic_with;
use crate::index::{Index, IndexError, RecordMeta};
use crate::model::tokenizer::SEP;
use crate::text::normalize_caption;

/// Extra candidates pulled beyond `k` on the first fetch.
const MIN_OVERFETCH: usize = 16;

/// Literal used for the separator when prefix evidence is rendered as text.
pub const SEP_MARKER: &str = "<sep>";

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("neighbor/token alignment broken: {neighbors} neighbors, {sequences} token sequences")]
    LengthMismatch { neighbors: usize, sequences: usize },
    #[error("probability must lie in [0, 1], got {0}")]
    InvalidProbability(f64),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CaptionMatch {
    /// Compare normalized captions (whitespace/NFC insensitive).
    #[default]
    Normalized,
    /// Compare raw caption strings byte for byte.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterPolicy {
    pub drop_same_image: bool,
    pub drop_same_caption: bool,
    /// Neighbors scoring at or above this cosine are dropped as re-encoded
    /// copies of the query image.
    pub near_duplicate_threshold: Option<f64>,
    pub caption_match: CaptionMatch,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            drop_same_image: true,
            drop_same_caption: true,
            near_duplicate_threshold: None,
            caption_match: CaptionMatch::Normalized,
        }
    }
}

impl FilterPolicy {
    /// Keeps everything: plain k-NN.
    pub fn none() -> Self {
        Self { drop_same_image: false, drop_same_caption: false, near_duplicate_threshold: None, caption_match: CaptionMatch::Normalized }
    }

    /// Image identity only, as used at inference time.
    pub fn image_only() -> Self {
        Self { drop_same_caption: false, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalQuery {
    pub image_id: Option<u64>,
    pub image_embedding: EmbeddingVector,
    ground_truth_caption: Option<String>,
    ground_truth_norm: Option<String>,
}

impl RetrievalQuery {
    /// Inference-time query: embedding only.
    pub fn new(image_embedding: EmbeddingVector) -> Self {
        Self { image_id: None, image_embedding, ground_truth_caption: None, ground_truth_norm: None }
    }

    pub fn with_image_id(mut self, id: u64) -> Self {
        self.image_id = Some(id);
        self
    }

    pub fn with_ground_truth(mut self, caption: impl Into<String>) -> Self {
        let caption = caption.into();
        self.ground_truth_norm = Some(normalize_caption(&caption));
        self.ground_truth_caption = Some(caption);
        self
    }

    pub fn ground_truth_caption(&self) -> Option<&str> {
        self.ground_truth_caption.as_deref()
    }

    fn rejects(&self, meta: &RecordMeta, score: f64, policy: &FilterPolicy) -> bool {
        if policy.drop_same_image && self.image_id == Some(meta.id) {
            return true;
        }
        if policy.drop_same_caption {
            let same = match policy.caption_match {
                CaptionMatch::Normalized => self.ground_truth_norm.as_deref() == Some(meta.caption_norm.as_str()),
                CaptionMatch::Raw => self.ground_truth_caption.as_deref() == Some(meta.caption.as_str()),
            };
            if same {
                return true;
            }
        }
        matches!(policy.near_duplicate_threshold, Some(t) if score >= t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedNeighbor {
    pub record_id: u64,
    pub image_uri: String,
    pub caption: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub neighbors: Vec<RetrievedNeighbor>,
    pub k_requested: usize,
    pub k_returned: usize,
    /// Rejected candidates that ranked above the last survivor (or every
    /// rejected record when fewer than `k` survived).
    pub filtered_out_count: usize,
}

impl RetrievalResult {
    pub fn empty(k: usize) -> Self {
        Self { neighbors: Vec::new(), k_requested: k, k_returned: 0, filtered_out_count: 0 }
    }

    pub fn captions(&self) -> impl Iterator<Item = &str> {
        self.neighbors.iter().map(|n| n.caption.as_str())
    }
}

/// Top `k` neighbors of `query` that pass `policy`.
///
/// Pulls `max(2k, k + 16)` raw candidates, filters, and doubles the fetch
/// until `k` survive or the whole index has been ranked.
pub fn retrieve_filtered(
    index: &Index,
    query: &RetrievalQuery,
    k: usize,
    policy: &FilterPolicy,
) -> Result<RetrievalResult, RetrievalError> {
    if k == 0 {
        return Err(IndexError::InvalidK.into());
    }
    let mut fetch = (2 * k).max(k + MIN_OVERFETCH).min(index.len());
    loop {
        let candidates = index.knn(&query.image_embedding, fetch)?;
        let mut neighbors = Vec::with_capacity(k);
        let mut rejected = 0;
        for c in &candidates {
            if neighbors.len() == k {
                break;
            }
            let meta = index.get(c.record_id).expect("knn returns stored ids");
            if query.rejects(meta, c.score, policy) {
                rejected += 1;
                continue;
            }
            neighbors.push(RetrievedNeighbor {
                record_id: meta.id,
                image_uri: meta.image_uri.clone(),
                caption: meta.caption.clone(),
                score: c.score,
            });
        }
        if neighbors.len() == k || fetch >= index.len() {
            return Ok(RetrievalResult { k_returned: neighbors.len(), neighbors, k_requested: k, filtered_out_count: rejected });
        }
        fetch = (fetch * 2).min(index.len());
    }
}

/// Query-dropout baseline: each token of neighbor `j` is dropped
/// independently with probability `p_max * max(0, s_j)`.
pub fn apply_query_dropout(
    result: &RetrievalResult,
    tokenized_neighbors: &[Vec<u32>],
    p_max: f64,
    rng_seed: u64,
) -> Result<Vec<Vec<u32>>, RetrievalError> {
    if !(0.0..=1.0).contains(&p_max) {
        return Err(RetrievalError::InvalidProbability(p_max));
    }
    if tokenized_neighbors.len() != result.neighbors.len() {
        return Err(RetrievalError::LengthMismatch {
            neighbors: result.neighbors.len(),
            sequences: tokenized_neighbors.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(result
        .neighbors
        .iter()
        .zip(tokenized_neighbors)
        .map(|(n, toks)| {
            let p = (p_max * n.score.max(0.0)).clamp(0.0, 1.0);
            toks.iter()
                .copied()
                .filter(|_| rng.random::<f64>() >= p)
                .collect()
        })
        .collect())
}

/// Top `n` captions in rank order, each followed by the separator marker.
pub fn render_prepend_context(result: &RetrievalResult, n: usize) -> String {
    let mut out = String::new();
    for c in result.captions().take(n) {
        out.push_str(c);
        out.push_str(SEP_MARKER);
    }
    out
}

/// Token form of [`render_prepend_context`]: caption bytes (each cut to
/// `max_caption_bytes`) followed by the reserved separator token.
pub fn prepend_tokens(result: &RetrievalResult, n: usize, max_caption_bytes: usize) -> Vec<u32> {
    let mut out = Vec::new();
    for c in result.captions().take(n) {
        out.extend(c.bytes().take(max_caption_bytes).map(u32::from));
        out.push(SEP);
    }
    out
}

/// One line of the retrieval trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub query_id: Option<u64>,
    pub neighbors: Vec<TraceNeighbor>,
    pub filtered_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceNeighbor {
    pub id: u64,
    pub score: f64,
    pub caption: String,
}

impl TraceRecord {
    pub fn new(query_id: Option<u64>, result: &RetrievalResult) -> Self {
        Self {
            query_id,
            neighbors: result
                .neighbors
                .iter()
                .map(|n| TraceNeighbor { id: n.record_id, score: n.score, caption: n.caption.clone() })
                .collect(),
            filtered_out: result.filtered_out_count,
        }
    }
}

pub fn write_trace(path: &Path, records: &[TraceRecord]) -> Result<(), RetrievalError> {
    write_atomic_with(path, |w| {
        for r in records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::normalize;
    use crate::index::{ImageTextRecord, IndexConfig};

    fn index_of(rows: &[(u64, &str, [f32; 2])]) -> Index {
        let records = rows
            .iter()
            .map(|(id, cap, v)| ImageTextRecord::new(*id, format!("img{id}"), *cap, normalize(v).unwrap()))
            .collect();
        Index::build(records, IndexConfig::exact(2)).unwrap()
    }

    fn result_with(scores: &[f64]) -> RetrievalResult {
        RetrievalResult {
            neighbors: scores
                .iter()
                .enumerate()
                .map(|(i, s)| RetrievedNeighbor {
                    record_id: i as u64,
                    image_uri: String::new(),
                    caption: ["A", "B", "C", "D"][i % 4].to_string(),
                    score: *s,
                })
                .collect(),
            k_requested: scores.len(),
            k_returned: scores.len(),
            filtered_out_count: 0,
        }
    }

    #[test]
    fn self_record_is_excluded() {
        let idx = index_of(&[(1, "a", [1.0, 0.0]), (2, "b", [0.9, 0.1]), (3, "c", [0.0, 1.0])]);
        let q = RetrievalQuery::new(normalize(&[1.0, 0.0]).unwrap()).with_image_id(1);
        let r = retrieve_filtered(&idx, &q, 1, &FilterPolicy::default()).unwrap();
        assert_eq!(r.neighbors[0].record_id, 2);
        assert_eq!(r.filtered_out_count, 1);
    }

    #[test]
    fn same_caption_never_returned() {
        let idx = index_of(&[
            (1, "dog on grass", [1.0, 0.0]),
            (2, "dog  on grass ", [0.99, 0.05]),
            (3, "a cat", [0.9, 0.3]),
            (4, "a bird", [0.5, 0.5]),
            (5, "a car", [0.1, 0.9]),
        ]);
        let q = RetrievalQuery::new(normalize(&[1.0, 0.0]).unwrap()).with_ground_truth("dog on grass");
        let r = retrieve_filtered(&idx, &q, 3, &FilterPolicy::default()).unwrap();
        let ids: Vec<u64> = r.neighbors.iter().map(|n| n.record_id).collect();
        assert_eq!(ids, vec![3, 4, 5]);
    }

    #[test]
    fn raw_caption_match_keeps_whitespace_variants() {
        let idx = index_of(&[(1, "dog on grass", [1.0, 0.0]), (2, "dog  on grass", [0.99, 0.05]), (3, "a cat", [0.9, 0.3])]);
        let q = RetrievalQuery::new(normalize(&[1.0, 0.0]).unwrap()).with_ground_truth("dog on grass");
        let policy = FilterPolicy { caption_match: CaptionMatch::Raw, ..FilterPolicy::default() };
        let r = retrieve_filtered(&idx, &q, 1, &policy).unwrap();
        assert_eq!(r.neighbors[0].record_id, 2);
    }

    #[test]
    fn near_duplicate_threshold_cuts_high_scores() {
        let idx = index_of(&[(1, "a", [1.0, 0.0]), (2, "b", [1.0, 0.001]), (3, "c", [0.7, 0.7])]);
        let q = RetrievalQuery::new(normalize(&[1.0, 0.0]).unwrap());
        let policy = FilterPolicy { near_duplicate_threshold: Some(0.99), ..FilterPolicy::default() };
        let r = retrieve_filtered(&idx, &q, 2, &policy).unwrap();
        assert_eq!(r.k_returned, 1);
        assert_eq!(r.neighbors[0].record_id, 3);
    }

    #[test]
    fn empty_after_filtering_is_not_an_error() {
        let idx = index_of(&[(1, "x", [1.0, 0.0]), (2, "x", [0.0, 1.0])]);
        let q = RetrievalQuery::new(normalize(&[1.0, 0.0]).unwrap()).with_ground_truth("x");
        let r = retrieve_filtered(&idx, &q, 2, &FilterPolicy::default()).unwrap();
        assert_eq!(r.k_returned, 0);
        assert_eq!(r.filtered_out_count, 2);
    }

    #[test]
    fn dropout_zero_is_identity_and_one_clears_unit_scores() {
        let res = result_with(&[1.0, 0.5]);
        let toks = vec![vec![1, 2, 3], vec![4, 5]];
        assert_eq!(apply_query_dropout(&res, &toks, 0.0, 3).unwrap(), toks);
        let out = apply_query_dropout(&res, &toks, 1.0, 3).unwrap();
        assert!(out[0].is_empty());
    }

    #[test]
    fn dropout_negative_scores_never_drop() {
        let res = result_with(&[-0.4]);
        let toks = vec![(0..100).collect::<Vec<u32>>()];
        assert_eq!(apply_query_dropout(&res, &toks, 1.0, 0).unwrap(), toks);
    }

    #[test]
    fn dropout_rate_matches_expectation() {
        let res = result_with(&[0.8]);
        let toks = vec![vec![7u32; 10_000]];
        let out = apply_query_dropout(&res, &toks, 0.5, 12345).unwrap();
        let rate = 1.0 - out[0].len() as f64 / 10_000.0;
        assert!((rate - 0.4).abs() <= 0.02, "rate {rate}");
    }

    #[test]
    fn dropout_alignment_checked() {
        let res = result_with(&[0.8, 0.7]);
        assert!(matches!(
            apply_query_dropout(&res, &[vec![1]], 0.3, 0),
            Err(RetrievalError::LengthMismatch { neighbors: 2, sequences: 1 })
        ));
        assert!(matches!(apply_query_dropout(&res, &[vec![1], vec![2]], 1.5, 0), Err(RetrievalError::InvalidProbability(_))));
    }

    #[test]
    fn dropout_is_deterministic_and_order_preserving() {
        let res = result_with(&[0.9]);
        let toks = vec![(0..200).collect::<Vec<u32>>()];
        let a = apply_query_dropout(&res, &toks, 0.3, 77).unwrap();
        let b = apply_query_dropout(&res, &toks, 0.3, 77).unwrap();
        assert_eq!(a, b);
        assert!(a[0].windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn prepend_context_rendering() {
        let res = result_with(&[0.9, 0.8, 0.7]);
        assert_eq!(render_prepend_context(&res, 2), "A<sep>B<sep>");
        assert_eq!(render_prepend_context(&RetrievalResult::empty(2), 2), "");
        assert_eq!(prepend_tokens(&res, 2, 16), vec![65, SEP, 66, SEP]);
    }
}
