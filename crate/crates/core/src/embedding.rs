//! Unit-norm embedding vectors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norms below this are treated as zero.
const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("embedding needs at least 2 components, got {0}")]
    TooShort(usize),
    #[error("embedding has a non-finite component at position {0}")]
    NonFinite(usize),
}

/// A fixed-dimension vector with unit L2 norm. The only way to construct
/// one is through [`normalize`], so cosine similarity is a plain dot product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    /// Cosine similarity with another unit vector.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.0, &other.0)
    }

    /// Wraps values that are already unit-norm (e.g. read back from a file
    /// written by this crate). The norm is not re-checked.
    pub(crate) fn from_normalized(values: Vec<f32>) -> Self {
        Self(values)
    }
}

/// Dot product accumulated in `f64`, left to right. Every score in the crate
/// goes through this function so equal inputs always give equal bits.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc
}

/// Scales `v` to unit L2 norm.
pub fn normalize(v: &[f32]) -> Result<EmbeddingVector, EmbeddingError> {
    if v.len() < 2 {
        return Err(EmbeddingError::TooShort(v.len()));
    }
    if let Some(pos) = v.iter().position(|x| !x.is_finite()) {
        return Err(EmbeddingError::NonFinite(pos));
    }
    let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if norm < MIN_NORM {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok(EmbeddingVector(
        v.iter().map(|x| (f64::from(*x) / norm) as f32).collect(),
    ))
}

/// Same as [`normalize`] for `f64` input.
pub fn normalize_f64(v: &[f64]) -> Result<EmbeddingVector, EmbeddingError> {
    if v.len() < 2 {
        return Err(EmbeddingError::TooShort(v.len()));
    }
    if let Some(pos) = v.iter().position(|x| !x.is_finite()) {
        return Err(EmbeddingError::NonFinite(pos));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < MIN_NORM {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok(EmbeddingVector(v.iter().map(|x| (x / norm) as f32).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_four_five() {
        let e = normalize(&[3.0, 4.0]).unwrap();
        assert!((e.as_slice()[0] - 0.6).abs() < 1e-7);
        assert!((e.as_slice()[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn zero_vector_rejected() {
        assert_eq!(normalize(&[0.0, 0.0, 0.0]), Err(EmbeddingError::ZeroVector));
    }

    #[test]
    fn nan_rejected() {
        assert_eq!(normalize(&[1.0, f32::NAN]), Err(EmbeddingError::NonFinite(1)));
    }

    #[test]
    fn seeded_64_dim_has_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v: Vec<f32> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let e = normalize(&v).unwrap();
        let norm: f64 = e.as_slice().iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-5);
        // direction preserved
        let cos = dot(&v, e.as_slice()) / v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((cos - 1.0).abs() < 1e-6);
    }
}
