//! Seeded synthetic corpora used by the experiments and tests.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Corpus;
use crate::embedding::{normalize_f64, EmbeddingVector};
use crate::index::ImageTextRecord;

const WORDS: &[&str] = &[
    "cat", "dog", "bus", "car", "sky", "sea", "man", "boy", "hat", "cup", "bed", "box", "toy", "sun", "owl", "fox",
    "cow", "pig", "van", "map", "egg", "jar", "pen", "kid", "tea", "oak", "elk", "bee", "ram", "yak", "ant", "bat",
];

/// Two-letter lead words; with two entries of [`WORDS`] they make
/// ten-byte captions.
const LEADS: &[&str] = &["an", "my", "to", "up", "no", "go", "do", "so", "we", "he", "me", "be", "us", "on", "at", "in"];

/// Member prefixes for the suffix-shared corpus. All three bytes long so the
/// shared suffix sits at the same byte offset in every caption.
const PREFIXES: &[&str] = &["red", "big", "old", "new", "hot", "wet", "dim", "shy"];

/// Per-coordinate noise that separates members of one visual group.
const GROUP_NOISE: f64 = 0.05;

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn jitter(rng: &mut ChaCha8Rng, center: &[f64], sigma: f64) -> EmbeddingVector {
    let v: Vec<f64> = center
        .iter()
        .map(|c| {
            let z: f64 = StandardNormal.sample(rng);
            c + sigma * z
        })
        .collect();
    normalize_f64(&v).expect("jittered vector is non-zero")
}

/// Ten bytes: a lead word and two entries of [`WORDS`].
fn short_caption(rng: &mut ChaCha8Rng) -> String {
    format!("{} {}", LEADS.choose(rng).unwrap(), words(rng, 2))
}

fn words(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// A corpus where roughly `dup_fraction` of the records belong to groups of
/// 2–3 near-identical images sharing one caption; the rest are singletons
/// with unique captions. Every caption is ten bytes, so a default-length
/// beam can reproduce it exactly.
pub fn duplicate_caption_corpus(n: usize, dup_fraction: f64, dim: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target_dups = (n as f64 * dup_fraction).round() as usize;
    let mut used = HashSet::new();
    let mut fresh_caption = |rng: &mut ChaCha8Rng| loop {
        let c = short_caption(rng);
        if used.insert(c.clone()) {
            return c;
        }
    };

    let mut records = Vec::with_capacity(n);
    let mut dup_count = 0;
    while dup_count < target_dups {
        let remaining = target_dups - dup_count;
        let size = match remaining {
            3 => 3,
            0..=4 => 2,
            _ if rng.random_bool(0.5) => 3,
            _ => 2,
        };
        let caption = fresh_caption(&mut rng);
        let center = random_unit(&mut rng, dim);
        let norm = center.iter().map(|x| x * x).sum::<f64>().sqrt();
        let center: Vec<f64> = center.iter().map(|x| x / norm).collect();
        for _ in 0..size {
            let id = records.len() as u64;
            records.push(ImageTextRecord::new(id, format!("synth://dup/{id}"), caption.clone(), jitter(&mut rng, &center, GROUP_NOISE)));
        }
        dup_count += size;
    }
    while records.len() < n {
        let caption = fresh_caption(&mut rng);
        let v = random_unit(&mut rng, dim);
        let id = records.len() as u64;
        records.push(ImageTextRecord::new(id, format!("synth://single/{id}"), caption, normalize_f64(&v).unwrap()));
    }
    // interleave duplicates with singletons so id order carries no signal
    let mut order: Vec<usize> = (0..records.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let records = order
        .into_iter()
        .enumerate()
        .map(|(new_id, old)| {
            let r = &records[old];
            ImageTextRecord::new(new_id as u64, r.image_uri.clone(), r.caption.clone(), r.embedding.clone())
        })
        .collect();
    Corpus::new(records).expect("synthetic corpus is valid")
}

/// `groups` visual clusters of `per_group` images. Every caption in a group
/// ends with the same two random words; each member has its own 3-byte
/// prefix, so captions within a group are distinct. Returns the group of
/// every record.
pub fn suffix_shared_corpus(groups: usize, per_group: usize, dim: usize, seed: u64) -> (Corpus, Vec<usize>) {
    assert!(per_group <= PREFIXES.len(), "at most {} members per group", PREFIXES.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(groups * per_group);
    let mut group_of = Vec::with_capacity(groups * per_group);
    let mut used = HashSet::new();
    for g in 0..groups {
        let suffix = loop {
            let s = words(&mut rng, 2);
            if used.insert(s.clone()) {
                break s;
            }
        };
        let center = random_unit(&mut rng, dim);
        let norm = center.iter().map(|x| x * x).sum::<f64>().sqrt();
        let center: Vec<f64> = center.iter().map(|x| x / norm).collect();
        let mut prefixes: Vec<&str> = PREFIXES.to_vec();
        for i in (1..prefixes.len()).rev() {
            prefixes.swap(i, rng.random_range(0..=i));
        }
        for prefix in prefixes.iter().take(per_group) {
            let id = records.len() as u64;
            records.push(ImageTextRecord::new(
                id,
                format!("synth://group/{g}/{id}"),
                format!("{prefix} {suffix}"),
                jitter(&mut rng, &center, GROUP_NOISE),
            ));
            group_of.push(g);
        }
    }
    (Corpus::new(records).expect("synthetic corpus is valid"), group_of)
}

/// `n` random images with unique random captions of 2–4 words.
pub fn random_pairs(n: usize, dim: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = HashSet::new();
    let records = (0..n)
        .map(|i| {
            let caption = loop {
                let len = rng.random_range(2..=4);
                let c = words(&mut rng, len);
                if used.insert(c.clone()) {
                    break c;
                }
            };
            let v = random_unit(&mut rng, dim);
            ImageTextRecord::new(i as u64, format!("synth://pair/{i}"), caption, normalize_f64(&v).unwrap())
        })
        .collect();
    Corpus::new(records).expect("synthetic corpus is valid")
}
