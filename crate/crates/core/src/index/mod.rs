//! Cosine k-nearest-neighbor index over unit-norm image embeddings.
//!
//! Two modes share one record store:
//!
//! * `exact` scans every row.
//! * `ivf` partitions rows with spherical k-means and scans only the
//!   `nprobe` partitions whose centroids are most similar to the query.
//!
//! Both modes score with the same [`dot`] routine and sort with the same
//! comparator (descending score, ascending id), so `ivf` with
//! `nprobe == nlist` returns exactly what `exact` returns.

mod kmeans;
mod persist;

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{dot, EmbeddingVector};
use crate::text::normalize_caption;

pub use kmeans::{spherical_kmeans, KMeansResult};
pub use persist::{INDEX_FORMAT_VERSION, INDEX_MAGIC};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("duplicate record id {0}")]
    DuplicateId(u64),
    #[error("cannot build an index from an empty corpus")]
    EmptyCorpus,
    #[error("invalid index config: {0}")]
    InvalidConfig(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("format/version mismatch: {0}")]
    FormatVersionMismatch(String),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("corrupt index at byte offset {offset}: {detail}")]
    Corrupt { offset: usize, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexMode {
    Exact,
    Ivf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    pub mode: IndexMode,
    pub dim: usize,
    pub nlist: usize,
    pub nprobe: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            mode: IndexMode::Exact,
            dim: 64,
            nlist: 16,
            nprobe: 4,
            kmeans_iters: 20,
            seed: 0,
        }
    }
}

impl IndexConfig {
    pub fn exact(dim: usize) -> Self {
        Self { mode: IndexMode::Exact, dim, ..Self::default() }
    }

    pub fn ivf(dim: usize, nlist: usize, nprobe: usize, seed: u64) -> Self {
        Self { mode: IndexMode::Ivf, dim, nlist, nprobe, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), IndexError> {
        if self.dim < 2 {
            return Err(IndexError::InvalidConfig(format!("dim must be >= 2, got {}", self.dim)));
        }
        if self.mode == IndexMode::Ivf {
            if self.nlist == 0 || self.nprobe == 0 {
                return Err(IndexError::InvalidConfig("nlist and nprobe must be positive".into()));
            }
            if self.nprobe > self.nlist {
                return Err(IndexError::InvalidConfig(format!(
                    "nprobe ({}) exceeds nlist ({})",
                    self.nprobe, self.nlist
                )));
            }
            if self.kmeans_iters == 0 {
                return Err(IndexError::InvalidConfig("kmeans_iters must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One database entry: an image, its caption and its embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTextRecord {
    pub id: u64,
    pub image_uri: String,
    pub caption: String,
    pub caption_norm: String,
    pub embedding: EmbeddingVector,
}

impl ImageTextRecord {
    pub fn new(id: u64, image_uri: impl Into<String>, caption: impl Into<String>, embedding: EmbeddingVector) -> Self {
        let caption = caption.into();
        Self {
            id,
            image_uri: image_uri.into(),
            caption_norm: normalize_caption(&caption),
            caption,
            embedding,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredNeighbor {
    pub record_id: u64,
    pub score: f64,
}

/// Ranking order for scored rows: descending score, then ascending id.
#[inline]
pub fn rank_order(a_score: f64, a_id: u64, b_score: f64, b_id: u64) -> Ordering {
    b_score.total_cmp(&a_score).then(a_id.cmp(&b_id))
}

/// Metadata half of a stored record.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordMeta {
    pub id: u64,
    pub image_uri: String,
    pub caption: String,
    pub caption_norm: String,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct IvfPartition {
    pub centroids: Vec<f32>,
    pub assignments: Vec<u32>,
    pub lists: Vec<Vec<u32>>,
}

impl IvfPartition {
    fn from_assignments(centroids: Vec<f32>, assignments: Vec<u32>, nlist: usize) -> Self {
        let mut lists = vec![Vec::new(); nlist];
        for (row, c) in assignments.iter().enumerate() {
            lists[*c as usize].push(row as u32);
        }
        Self { centroids, assignments, lists }
    }
}

/// Immutable k-NN index. Safe to share between threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    config: IndexConfig,
    meta: Vec<RecordMeta>,
    embeddings: Vec<f32>,
    by_id: HashMap<u64, usize>,
    ivf: Option<IvfPartition>,
}

impl Index {
    pub fn build(records: Vec<ImageTextRecord>, config: IndexConfig) -> Result<Self, IndexError> {
        config.validate()?;
        if records.is_empty() {
            return Err(IndexError::EmptyCorpus);
        }
        let dim = config.dim;
        let mut meta = Vec::with_capacity(records.len());
        let mut embeddings = Vec::with_capacity(records.len() * dim);
        let mut by_id = HashMap::with_capacity(records.len());
        for (row, r) in records.into_iter().enumerate() {
            if r.embedding.dim() != dim {
                return Err(IndexError::DimensionMismatch { expected: dim, found: r.embedding.dim() });
            }
            if by_id.insert(r.id, row).is_some() {
                return Err(IndexError::DuplicateId(r.id));
            }
            embeddings.extend_from_slice(r.embedding.as_slice());
            meta.push(RecordMeta {
                id: r.id,
                image_uri: r.image_uri,
                caption: r.caption,
                caption_norm: r.caption_norm,
            });
        }
        let ivf = match config.mode {
            IndexMode::Exact => None,
            IndexMode::Ivf => {
                if config.nlist > meta.len() {
                    return Err(IndexError::InvalidConfig(format!(
                        "nlist ({}) exceeds record count ({})",
                        config.nlist,
                        meta.len()
                    )));
                }
                let km = spherical_kmeans(&embeddings, dim, config.nlist, config.kmeans_iters, config.seed);
                Some(IvfPartition::from_assignments(km.centroids, km.assignments, config.nlist))
            }
        };
        Ok(Self { config, meta, embeddings, by_id, ivf })
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn meta(&self, row: usize) -> &RecordMeta {
        &self.meta[row]
    }

    pub fn embedding_row(&self, row: usize) -> &[f32] {
        &self.embeddings[row * self.config.dim..(row + 1) * self.config.dim]
    }

    pub fn row_of(&self, id: u64) -> Option<usize> {
        self.by_id.get(&id).copied()
    }

    pub fn get(&self, id: u64) -> Option<&RecordMeta> {
        self.row_of(id).map(|r| &self.meta[r])
    }

    /// Cluster id of every row, `None` for exact indexes.
    pub fn assignments(&self) -> Option<&[u32]> {
        self.ivf.as_ref().map(|p| p.assignments.as_slice())
    }

    pub fn centroids(&self) -> Option<&[f32]> {
        self.ivf.as_ref().map(|p| p.centroids.as_slice())
    }

    /// Reconstructs the records, embeddings included, in storage order.
    pub fn records(&self) -> Vec<ImageTextRecord> {
        (0..self.len())
            .map(|row| {
                let m = &self.meta[row];
                ImageTextRecord {
                    id: m.id,
                    image_uri: m.image_uri.clone(),
                    caption: m.caption.clone(),
                    caption_norm: m.caption_norm.clone(),
                    embedding: EmbeddingVector::from_normalized(self.embedding_row(row).to_vec()),
                }
            })
            .collect()
    }

    /// Top `min(k, len)` neighbors of `query` by cosine similarity.
    pub fn knn(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<ScoredNeighbor>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if query.dim() != self.dim() {
            return Err(IndexError::DimensionMismatch { expected: self.dim(), found: query.dim() });
        }
        let q = query.as_slice();
        let mut scored: Vec<(f64, u64)> = match &self.ivf {
            None => (0..self.len())
                .map(|row| (dot(q, self.embedding_row(row)), self.meta[row].id))
                .collect(),
            Some(part) => {
                let probes = self.probe_order(part, q);
                let mut out = Vec::new();
                for c in probes.into_iter().take(self.config.nprobe) {
                    for &row in &part.lists[c] {
                        let row = row as usize;
                        out.push((dot(q, self.embedding_row(row)), self.meta[row].id));
                    }
                }
                out
            }
        };
        let cmp = |a: &(f64, u64), b: &(f64, u64)| rank_order(a.0, a.1, b.0, b.1);
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(score, record_id)| ScoredNeighbor { record_id, score })
            .collect())
    }

    fn probe_order(&self, part: &IvfPartition, q: &[f32]) -> Vec<usize> {
        let dim = self.dim();
        let mut order: Vec<(f64, usize)> = part
            .centroids
            .chunks_exact(dim)
            .enumerate()
            .map(|(c, centroid)| (dot(q, centroid), c))
            .collect();
        order.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        order.into_iter().map(|(_, c)| c).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::normalize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(id: u64, v: &[f32]) -> ImageTextRecord {
        ImageTextRecord::new(id, format!("img://{id}"), format!("caption {id}"), normalize(v).unwrap())
    }

    fn random_records(n: usize, dim: usize, seed: u64) -> Vec<ImageTextRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                rec(i as u64, &v)
            })
            .collect()
    }

    #[test]
    fn three_records_exact() {
        let idx = Index::build(
            vec![rec(1, &[1.0, 0.0, 0.0, 0.0]), rec(2, &[0.0, 1.0, 0.0, 0.0]), rec(3, &[0.0, 0.0, 1.0, 1.0])],
            IndexConfig::exact(4),
        )
        .unwrap();
        assert_eq!(idx.len(), 3);
        let q = normalize(&[0.0, 1.0, 0.0, 0.0]).unwrap();
        let out = idx.knn(&q, 1).unwrap();
        assert_eq!(out[0].record_id, 2);
        assert!((out[0].score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hand_computed_ranking() {
        let idx = Index::build(
            vec![rec(1, &[1.0, 0.0]), rec(2, &[0.0, 1.0]), rec(3, &[0.6, 0.8])],
            IndexConfig::exact(2),
        )
        .unwrap();
        let out = idx.knn(&normalize(&[1.0, 0.0]).unwrap(), 2).unwrap();
        assert_eq!(out.iter().map(|n| n.record_id).collect::<Vec<_>>(), vec![1, 3]);
        assert!((out[0].score - 1.0).abs() < 1e-6);
        assert!((out[1].score - 0.6).abs() < 1e-6);
    }

    #[test]
    fn k_larger_than_index() {
        let idx = Index::build(random_records(5, 8, 1), IndexConfig::exact(8)).unwrap();
        let out = idx.knn(&idx.records()[0].embedding, 50).unwrap();
        assert_eq!(out.len(), 5);
    }

    #[test]
    fn ties_broken_by_ascending_id() {
        let idx = Index::build(
            vec![rec(9, &[1.0, 0.0]), rec(4, &[1.0, 0.0]), rec(7, &[1.0, 0.0])],
            IndexConfig::exact(2),
        )
        .unwrap();
        let out = idx.knn(&normalize(&[1.0, 0.0]).unwrap(), 3).unwrap();
        assert_eq!(out.iter().map(|n| n.record_id).collect::<Vec<_>>(), vec![4, 7, 9]);
    }

    #[test]
    fn mixed_dims_rejected() {
        let err = Index::build(vec![rec(1, &[1.0; 4]), rec(2, &[1.0; 8])], IndexConfig::exact(4)).unwrap_err();
        assert!(matches!(err, IndexError::DimensionMismatch { expected: 4, found: 8 }));
    }

    #[test]
    fn duplicate_ids_and_empty_rejected() {
        let err = Index::build(vec![rec(1, &[1.0, 0.0]), rec(1, &[0.0, 1.0])], IndexConfig::exact(2)).unwrap_err();
        assert!(matches!(err, IndexError::DuplicateId(1)));
        assert!(matches!(Index::build(vec![], IndexConfig::exact(2)), Err(IndexError::EmptyCorpus)));
    }

    #[test]
    fn query_dim_checked_and_k_positive() {
        let idx = Index::build(random_records(4, 8, 2), IndexConfig::exact(8)).unwrap();
        let q = normalize(&[1.0, 2.0]).unwrap();
        assert!(matches!(idx.knn(&q, 1), Err(IndexError::DimensionMismatch { .. })));
        assert!(matches!(idx.knn(&idx.records()[0].embedding, 0), Err(IndexError::InvalidK)));
    }

    #[test]
    fn ivf_assigns_every_record_once() {
        let idx = Index::build(random_records(100, 16, 3), IndexConfig::ivf(16, 4, 1, 11)).unwrap();
        let part = idx.ivf.as_ref().unwrap();
        assert_eq!(part.lists.iter().map(Vec::len).sum::<usize>(), 100);
        let mut seen = vec![0; 100];
        for l in &part.lists {
            for &r in l {
                seen[r as usize] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn ivf_full_probe_matches_exact() {
        let records = random_records(300, 16, 4);
        let exact = Index::build(records.clone(), IndexConfig::exact(16)).unwrap();
        let ivf = Index::build(records, IndexConfig::ivf(16, 8, 8, 5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let v: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = normalize(&v).unwrap();
            assert_eq!(exact.knn(&q, 10).unwrap(), ivf.knn(&q, 10).unwrap());
        }
    }

    #[test]
    fn ivf_config_validation() {
        assert!(IndexConfig::ivf(8, 2, 3, 0).validate().is_err());
        assert!(IndexConfig::exact(1).validate().is_err());
        let err = Index::build(random_records(3, 8, 0), IndexConfig::ivf(8, 4, 1, 0)).unwrap_err();
        assert!(matches!(err, IndexError::InvalidConfig(_)));
    }

    #[test]
    fn clustering_is_deterministic_per_seed() {
        let records = random_records(120, 8, 6);
        let a = Index::build(records.clone(), IndexConfig::ivf(8, 6, 2, 42)).unwrap();
        let b = Index::build(records, IndexConfig::ivf(8, 6, 2, 42)).unwrap();
        assert_eq!(a.assignments(), b.assignments());
    }
}
