//! Corpus BLEU@4 and CIDEr-D.
//!
//! Both metrics share one tokenization: lowercase, drop ASCII punctuation,
//! split on whitespace.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no evaluation pairs")]
    EmptyInput,
    #[error("pair {0} has no references")]
    NoReferences(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub candidate: String,
    pub references: Vec<String>,
}

impl EvalPair {
    pub fn new(candidate: impl Into<String>, references: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self { candidate: candidate.into(), references: references.into_iter().map(Into::into).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub bleu4: f64,
    pub cider_d: f64,
}

pub fn evaluate(pairs: &[EvalPair]) -> Result<EvalReport, MetricsError> {
    Ok(EvalReport { n: pairs.len(), bleu4: bleu4(pairs)?, cider_d: cider_d(pairs)? })
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

type NgramCounts<'a> = HashMap<&'a [String], usize>;

fn ngram_counts(tokens: &[String], n: usize) -> NgramCounts<'_> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn validate(pairs: &[EvalPair]) -> Result<(), MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    match pairs.iter().position(|p| p.references.is_empty()) {
        Some(i) => Err(MetricsError::NoReferences(i)),
        None => Ok(()),
    }
}

/// Unsmoothed corpus BLEU with n-grams up to 4.
pub fn bleu4(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    validate(pairs)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for p in pairs {
        let cand = tokenize(&p.candidate);
        let refs: Vec<Vec<String>> = p.references.iter().map(|r| tokenize(r)).collect();
        cand_len += cand.len();
        // closest reference length, shorter one on ties
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|l| (l.abs_diff(cand.len()), *l))
            .expect("references are non-empty");
        for n in 1..=4 {
            let mut max_ref: NgramCounts<'_> = HashMap::new();
            for r in &refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in ngram_counts(&cand, n) {
                matched[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if cand_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if cand_len > ref_len { 1.0 } else { 1.0 - ref_len as f64 / cand_len as f64 };
    Ok((log_p + bp.min(0.0)).exp())
}

const CIDER_SIGMA: f64 = 6.0;

struct TfIdf {
    vecs: [HashMap<Vec<String>, f64>; 4],
    norms: [f64; 4],
    len: usize,
}

fn tfidf(tokens: &[String], df: &HashMap<Vec<String>, usize>, log_n: f64) -> TfIdf {
    let mut vecs: [HashMap<Vec<String>, f64>; 4] = Default::default();
    let mut norms = [0.0; 4];
    for n in 1..=4 {
        for (g, tf) in ngram_counts(tokens, n) {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            let w = tf as f64 * (log_n - d.ln());
            norms[n - 1] += w * w;
            vecs[n - 1].insert(g.to_vec(), w);
        }
    }
    TfIdf { vecs, norms: norms.map(f64::sqrt), len: tokens.len() }
}

fn cider_sim(h: &TfIdf, r: &TfIdf) -> [f64; 4] {
    let delta = h.len as f64 - r.len as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut out = [0.0; 4];
    for n in 0..4 {
        let mut v: f64 = h.vecs[n].iter().map(|(g, hv)| r.vecs[n].get(g).map_or(0.0, |rv| hv.min(*rv) * rv)).sum();
        if h.norms[n] != 0.0 && r.norms[n] != 0.0 {
            v /= h.norms[n] * r.norms[n];
        }
        out[n] = v * penalty;
    }
    out
}

/// CIDEr-D with document frequencies taken over each pair's reference set.
/// A one-pair corpus scores 0 because every reference n-gram has full
/// document frequency.
pub fn cider_d(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    validate(pairs)?;
    let refs: Vec<Vec<Vec<String>>> = pairs.iter().map(|p| p.references.iter().map(|r| tokenize(r)).collect()).collect();
    let mut df: HashMap<Vec<String>, usize> = HashMap::new();
    for image_refs in &refs {
        let mut seen: std::collections::HashSet<&[String]> = std::collections::HashSet::new();
        for r in image_refs {
            for n in 1..=4 {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g.to_vec()).or_insert(0) += 1;
        }
    }
    let log_n = (pairs.len() as f64).ln();
    let mut total = 0.0;
    for (p, image_refs) in pairs.iter().zip(&refs) {
        let h = tfidf(&tokenize(&p.candidate), &df, log_n);
        let mut acc = [0.0; 4];
        for r in image_refs {
            let s = cider_sim(&h, &tfidf(r, &df, log_n));
            for n in 0..4 {
                acc[n] += s[n];
            }
        }
        let mean_n: f64 = acc.iter().sum::<f64>() / 4.0;
        total += mean_n / image_refs.len() as f64 * 10.0;
    }
    Ok(total / pairs.len() as f64)
}
