//! Independent brute-force re-implementations used as test oracles. Nothing
//! here calls the code under test except for plain data accessors.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use ragcap_core::text::normalize_caption;
use ragcap_core::ImageTextRecord;

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        s += a[i] as f64 * b[i] as f64;
    }
    s
}

/// Full ranking by cosine (unit vectors), score descending then id ascending.
pub fn full_ranking(records: &[ImageTextRecord], query: &[f32]) -> Vec<(u64, f64)> {
    let mut all: Vec<(u64, f64)> = records.iter().map(|r| (r.id, dot64(r.embedding.as_slice(), query))).collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all
}

pub fn knn(records: &[ImageTextRecord], query: &[f32], k: usize) -> Vec<u64> {
    full_ranking(records, query).into_iter().take(k).map(|(id, _)| id).collect()
}

/// Rank everything, drop records with the query's id or normalized
/// caption, keep the first `k`.
pub fn filtered_knn(records: &[ImageTextRecord], query: &[f32], image_id: u64, caption: &str, k: usize) -> Vec<u64> {
    let by_id: HashMap<u64, &ImageTextRecord> = records.iter().map(|r| (r.id, r)).collect();
    let norm = normalize_caption(caption);
    full_ranking(records, query)
        .into_iter()
        .filter(|(id, _)| *id != image_id && normalize_caption(&by_id[id].caption) != norm)
        .take(k)
        .map(|(id, _)| id)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSample {
    pub band: (f64, f64),
    pub shots: Vec<u64>,
    pub query: u64,
}

/// Exhaustive two-step interleave construction.
pub fn interleave(
    records: &[ImageTextRecord],
    caption_vecs: &[Vec<f32>],
    band: (f64, f64),
    shots: usize,
    widen_step: f64,
    widen_limit: f64,
) -> Vec<OracleSample> {
    let mut bands = vec![band];
    let mut w = widen_step;
    while widen_step > 0.0 && widen_limit > 0.0 {
        let ww = w.min(widen_limit);
        bands.push(((band.0 - ww).max(0.0), (band.1 + ww).min(1.0)));
        if ww >= widen_limit {
            break;
        }
        w += widen_step;
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by_key(|i| records[*i].id);
    let mut out = Vec::new();
    for q in order {
        for &(lo, hi) in &bands {
            let mut cands = Vec::new();
            for r in 0..records.len() {
                if r == q {
                    continue;
                }
                let a = records[q].embedding.as_slice();
                let b = records[r].embedding.as_slice();
                let mut sq = 0.0f64;
                for i in 0..a.len() {
                    let d = a[i] as f64 - b[i] as f64;
                    sq += d * d;
                }
                let nd = sq.sqrt() / 2.0;
                if lo <= nd && nd <= hi {
                    cands.push((dot64(&caption_vecs[q], &caption_vecs[r]), records[r].id));
                }
            }
            if cands.len() >= shots {
                cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                out.push(OracleSample {
                    band: (lo, hi),
                    shots: cands[..shots].iter().map(|c| c.1).collect(),
                    query: records[q].id,
                });
                break;
            }
        }
    }
    out
}

/// Fraction of records whose normalized caption occurs more than once.
pub fn dedup_ratio(captions: &[String]) -> f64 {
    let mut count: BTreeMap<String, usize> = BTreeMap::new();
    for c in captions {
        *count.entry(normalize_caption(c)).or_default() += 1;
    }
    let dup: usize = captions.iter().filter(|c| count[&normalize_caption(c)] > 1).count();
    dup as f64 / captions.len() as f64
}

fn words(s: &str) -> Vec<String> {
    let mut cleaned = String::new();
    for ch in s.chars() {
        if ch.is_ascii_punctuation() {
            continue;
        }
        for l in ch.to_lowercase() {
            cleaned.push(l);
        }
    }
    cleaned.split_whitespace().map(|w| w.to_string()).collect()
}

fn grams(ws: &[String], n: usize) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    if ws.len() >= n {
        for i in 0..=ws.len() - n {
            *m.entry(ws[i..i + n].join(" ")).or_insert(0.0) += 1.0;
        }
    }
    m
}

/// Corpus BLEU-4, unsmoothed.
pub fn bleu4(pairs: &[(String, Vec<String>)]) -> f64 {
    let mut num = [0.0f64; 4];
    let mut den = [0.0f64; 4];
    let mut c = 0.0;
    let mut r = 0.0;
    for (cand, refs) in pairs {
        let cw = words(cand);
        let rws: Vec<Vec<String>> = refs.iter().map(|x| words(x)).collect();
        c += cw.len() as f64;
        let mut best = rws[0].len();
        for rw in &rws {
            let d = (rw.len() as i64 - cw.len() as i64).abs();
            let bd = (best as i64 - cw.len() as i64).abs();
            if d < bd || (d == bd && rw.len() < best) {
                best = rw.len();
            }
        }
        r += best as f64;
        for n in 1..=4 {
            let cg = grams(&cw, n);
            for (g, cnt) in &cg {
                let mut maxr: f64 = 0.0;
                for rw in &rws {
                    maxr = maxr.max(*grams(rw, n).get(g).unwrap_or(&0.0));
                }
                num[n - 1] += cnt.min(maxr);
                den[n - 1] += cnt;
            }
        }
    }
    if num.iter().any(|x| *x == 0.0) {
        return 0.0;
    }
    let geo = (0..4).map(|i| (num[i] / den[i]).ln()).sum::<f64>() / 4.0;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * geo.exp()
}

/// CIDEr-D written straight from the formula: idf from per-image reference
/// document frequency, clipped tf-idf dot product, Gaussian length penalty
/// with sigma 6, averaged over n and references, times 10.
pub fn cider_d(pairs: &[(String, Vec<String>)]) -> f64 {
    let n_img = pairs.len() as f64;
    let mut df: BTreeMap<String, f64> = BTreeMap::new();
    for (_, refs) in pairs {
        let mut seen = std::collections::BTreeSet::new();
        for r in refs {
            let w = words(r);
            for n in 1..=4 {
                for g in grams(&w, n).into_keys() {
                    seen.insert(g);
                }
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0.0) += 1.0;
        }
    }
    let vec_of = |w: &[String], n: usize| -> BTreeMap<String, f64> {
        grams(w, n)
            .into_iter()
            .map(|(g, tf)| {
                let d = df.get(&g).copied().unwrap_or(0.0).max(1.0);
                (g, tf * (n_img.ln() - d.ln()))
            })
            .collect()
    };
    let norm = |v: &BTreeMap<String, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (cand, refs) in pairs {
        let cw = words(cand);
        let mut score = 0.0;
        for r in refs {
            let rw = words(r);
            let delta = cw.len() as f64 - rw.len() as f64;
            let pen = (-(delta * delta) / 72.0).exp();
            let mut per_n = 0.0;
            for n in 1..=4 {
                let vh = vec_of(&cw, n);
                let vr = vec_of(&rw, n);
                let mut s = 0.0;
                for (g, h) in &vh {
                    if let Some(rv) = vr.get(g) {
                        s += h.min(*rv) * rv;
                    }
                }
                let (nh, nr) = (norm(&vh), norm(&vr));
                if nh != 0.0 && nr != 0.0 {
                    s /= nh * nr;
                }
                per_n += s * pen;
            }
            score += per_n / 4.0;
        }
        total += score / refs.len() as f64 * 10.0;
    }
    total / n_img
}

/// Fixed metric suite: (candidate, references) corpora.
pub fn metric_suite() -> Vec<Vec<(String, Vec<String>)>> {
    fn p(c: &str, r: &[&str]) -> (String, Vec<String>) {
        (c.to_string(), r.iter().map(|s| s.to_string()).collect())
    }
    vec![
        vec![p("the cat sat on the mat quietly", &["the cat sat on the mat today"])],
        vec![
            p("a man riding a horse on a beach", &["a man rides a horse along the beach", "a person on horseback near the sea"]),
            p("two dogs play in the snow", &["two dogs playing in deep snow", "dogs play outside in winter", "a pair of dogs in snow"]),
            p("a red bus", &["a red double decker bus drives down the street", "a bus on a city road"]),
        ],
        vec![
            p("a plate of food on a table", &["a plate of food on a table"]),
            p("a boy kicks a soccer ball", &["a boy kicks a soccer ball"]),
        ],
        vec![
            p("the the the the the the", &["the cat is on the mat", "there is a cat on the mat"]),
            p("a cat on a mat on a mat", &["a cat on a mat", "the cat sits on the mat"]),
            p("Is this... a DOG?", &["A dog, sitting!", "this is a dog", "a small dog sits", "dog", "a brown dog on grass"]),
        ],
        vec![
            p("a woman holding an umbrella in the rain", &[
                "a woman holds an umbrella in the rain",
                "woman with umbrella walking in rain",
                "a lady carrying an umbrella on a rainy day",
                "a person under an umbrella",
                "someone walks in the rain with an umbrella",
            ]),
            p("a train at a station", &["a train stopped at the station", "a passenger train at a platform"]),
            p("people sitting on a bench in a park", &["people sit on a park bench", "two people on a bench"]),
            p("a kitchen with a stove", &["a kitchen with a stove and a sink", "a small kitchen"]),
        ],
    ]
}
