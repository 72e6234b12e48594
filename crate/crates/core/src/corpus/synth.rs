//! Deterministic stand-in text/image embeddings.
//!
//! Byte trigrams are hashed into a fixed number of count buckets and the
//! count vector is projected through a seeded Gaussian matrix. Strings that
//! share many trigrams land close together; unrelated strings are nearly
//! orthogonal.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedding::{normalize_f64, EmbeddingVector};

pub const SYNTH_BUCKETS: usize = 512;

const START: u8 = 0x02;
const END: u8 = 0x03;

#[derive(Debug, Clone)]
pub struct SynthEmbedder {
    dim: usize,
    /// `SYNTH_BUCKETS × dim`, row-major.
    projection: Vec<f64>,
}

impl SynthEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim >= 8, "synthetic embeddings need dim >= 8");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..SYNTH_BUCKETS * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { dim, projection }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed(&self, text: &str) -> EmbeddingVector {
        let mut padded = Vec::with_capacity(text.len() + 3);
        padded.extend_from_slice(&[START, START]);
        padded.extend_from_slice(text.as_bytes());
        padded.push(END);

        let mut counts = [0u32; SYNTH_BUCKETS];
        for tri in padded.windows(3) {
            counts[bucket(tri)] += 1;
        }
        let mut out = vec![0.0f64; self.dim];
        for (b, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let row = &self.projection[b * self.dim..(b + 1) * self.dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += f64::from(c) * w;
            }
        }
        normalize_f64(&out).unwrap_or_else(|_| {
            let mut axis = vec![0.0; self.dim];
            axis[0] = 1.0;
            normalize_f64(&axis).expect("axis vector")
        })
    }
}

/// One-shot convenience wrapper; build a [`SynthEmbedder`] to embed many
/// strings with the same projection.
pub fn synth_embed(text: &str, dim: usize, seed: u64) -> EmbeddingVector {
    SynthEmbedder::new(dim, seed).embed(text)
}

// FNV-1a
fn bucket(tri: &[u8]) -> usize {
    let mut h: u32 = 0x811c_9dc5;
    for &b in tri {
        h ^= u32::from(b);
        h = h.wrapping_mul(0x0100_0193);
    }
    (h as usize) % SYNTH_BUCKETS
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn deterministic() {
        assert_eq!(synth_embed("a red bus", 32, 4), synth_embed("a red bus", 32, 4));
        assert_ne!(synth_embed("a red bus", 32, 4), synth_embed("a red bus", 32, 5));
    }

    #[test]
    fn similar_strings_score_higher() {
        let e = SynthEmbedder::new(64, 1);
        let a = e.embed("a red bus on the street");
        let b = e.embed("a red bus on a street");
        let c = e.embed("quantum field theory lecture");
        assert!(a.cosine(&b) > a.cosine(&c));
        assert!(a.cosine(&b) > 0.7);
    }

    #[test]
    fn unit_norm_for_random_strings() {
        let e = SynthEmbedder::new(24, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let len = rng.random_range(0..40);
            let s: String = (0..len).map(|_| rng.random_range(b' '..=b'~') as char).collect();
            let v = e.embed(&s);
            let n: f64 = v.as_slice().iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn empty_string_embeds() {
        assert_eq!(synth_embed("", 8, 0).dim(), 8);
    }
}
