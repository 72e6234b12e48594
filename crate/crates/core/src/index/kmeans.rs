//! Spherical k-means for the inverted-file partition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::dot;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// `k × dim`, each row unit-norm.
    pub centroids: Vec<f32>,
    /// Cluster of every input row.
    pub assignments: Vec<u32>,
}

/// Clusters unit-norm rows of `data` into `k` groups by cosine similarity.
///
/// Seeding is k-means++ (squared chord distance `2 - 2cos`), followed by
/// exactly `iters` Lloyd rounds. A cluster that ends a round empty is
/// re-seeded with the row least similar to its current centroid.
pub fn spherical_kmeans(data: &[f32], dim: usize, k: usize, iters: usize, seed: u64) -> KMeansResult {
    let n = data.len() / dim;
    assert!(k >= 1 && k <= n, "k must be in 1..=n");
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids: Vec<f32> = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut best_d2: Vec<f64> = (0..n).map(|i| chord2(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = best_d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in best_d2.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        };
        centroids.extend_from_slice(row(pick));
        for (i, d) in best_d2.iter_mut().enumerate() {
            *d = d.min(chord2(row(i), row(pick)));
        }
    }

    let mut assignments = vec![0u32; n];
    let mut sims = vec![0.0f64; n];
    for _ in 0..iters {
        assign(data, dim, &centroids, &mut assignments, &mut sims);

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i] as usize;
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += f64::from(*x);
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] == 0 {
                // farthest point not already used for a re-seed this round
                let far = (0..n)
                    .filter(|i| !taken[*i])
                    .min_by(|a, b| sims[*a].total_cmp(&sims[*b]).then(a.cmp(b)))
                    .unwrap_or(0);
                taken[far] = true;
                centroids[c * dim..(c + 1) * dim].copy_from_slice(row(far));
                continue;
            }
            let s = &sums[c * dim..(c + 1) * dim];
            let norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for (dst, v) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(s) {
                    *dst = (v / norm) as f32;
                }
            }
        }
    }
    assign(data, dim, &centroids, &mut assignments, &mut sims);
    KMeansResult { centroids, assignments }
}

fn chord2(a: &[f32], b: &[f32]) -> f64 {
    (2.0 - 2.0 * dot(a, b)).max(0.0)
}

fn assign(data: &[f32], dim: usize, centroids: &[f32], assignments: &mut [u32], sims: &mut [f64]) {
    for (i, x) in data.chunks_exact(dim).enumerate() {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
            let s = dot(x, centroid);
            if s > best.0 {
                best = (s, c);
            }
        }
        assignments[i] = best.1 as u32;
        sims[i] = best.0;
    }
}
