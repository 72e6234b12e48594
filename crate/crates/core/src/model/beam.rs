//! Beam search and greedy decoding.

use serde::{Deserialize, Serialize};

use super::network::{decoder_forward, encode_neighbors, DecodeMode, NeighborEncoding};
use super::tensor::Tensor;
use super::tokenizer::{detokenize, tokenize, BOS, EOS, SEP, VOCAB_SIZE};
use super::train::RetrievalMode;
use super::{ModelError, ModelParams};
use crate::embedding::EmbeddingVector;
use crate::retriever::{prepend_tokens, RetrievalResult};

/// Log-probabilities of the next token after `prefix`. Impossible tokens
/// carry `-inf`.
pub trait NextTokenScorer {
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>, ModelError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub beam: usize,
    /// Content tokens, not counting `<bos>`, prefix evidence or `<eos>`.
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam: 3, max_len: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens without the start sequence or `<eos>`.
    pub tokens: Vec<u32>,
    /// Total log-probability, `<eos>` included when finished.
    pub score: f64,
    pub finished: bool,
}

fn argmax(lp: &[f64]) -> Option<(u32, f64)> {
    let mut best: Option<(u32, f64)> = None;
    for (t, &v) in lp.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|(_, b)| v > b) {
            best = Some((t as u32, v));
        }
    }
    best
}

/// Always takes the most likely token (lowest id on ties). After
/// `max_len` content tokens only `<eos>` may follow.
pub fn greedy_decode(scorer: &mut dyn NextTokenScorer, start: &[u32], max_len: usize) -> Result<Hypothesis, ModelError> {
    let mut seq = start.to_vec();
    let mut h = Hypothesis { tokens: Vec::new(), score: 0.0, finished: false };
    loop {
        let mut lp = scorer.log_probs(&seq)?;
        if h.tokens.len() == max_len {
            for (t, v) in lp.iter_mut().enumerate() {
                if t as u32 != EOS {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
        let Some((t, v)) = argmax(&lp) else { return Ok(h) };
        h.score += v;
        if t == EOS {
            h.finished = true;
            return Ok(h);
        }
        h.tokens.push(t);
        seq.push(t);
    }
}

/// Beam search over raw log-probabilities (no length normalization).
///
/// Each step expands every live hypothesis, orders candidates by score,
/// then parent rank, then token id, and keeps the first `beam`. Candidates
/// ending in `<eos>` are set aside as completed. Returns the best completed
/// hypothesis, or the best live one if none completed.
pub fn beam_search(scorer: &mut dyn NextTokenScorer, start: &[u32], cfg: &BeamConfig) -> Result<Hypothesis, ModelError> {
    let beam = cfg.beam.max(1);
    let mut live = vec![Hypothesis { tokens: Vec::new(), score: 0.0, finished: false }];
    let mut completed: Vec<Hypothesis> = Vec::new();
    for step in 0..=cfg.max_len {
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (parent, h) in live.iter().enumerate() {
            let mut seq = start.to_vec();
            seq.extend(&h.tokens);
            let lp = scorer.log_probs(&seq)?;
            for (t, &v) in lp.iter().enumerate() {
                let t = t as u32;
                if !v.is_finite() || (step == cfg.max_len && t != EOS) {
                    continue;
                }
                candidates.push((h.score + v, parent, t));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam);
        for (score, parent, t) in candidates.into_iter().take(beam) {
            let mut tokens = live[parent].tokens.clone();
            if t == EOS {
                completed.push(Hypothesis { tokens, score, finished: true });
            } else {
                tokens.push(t);
                next.push(Hypothesis { tokens, score, finished: false });
            }
        }
        if next.is_empty() {
            live.clear();
            break;
        }
        live = next;
        // scores only fall, so no live hypothesis can overtake this one
        let best_done = completed.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if best_done >= live[0].score {
            break;
        }
    }
    let pick = |hs: &[Hypothesis]| {
        hs.iter().fold(None::<&Hypothesis>, |best, h| match best {
            Some(b) if b.score >= h.score => Some(b),
            _ => Some(h),
        })
        .cloned()
    };
    Ok(pick(&completed).or_else(|| pick(&live)).unwrap_or(Hypothesis { tokens: Vec::new(), score: 0.0, finished: false }))
}

/// Scores tokens with the model, conditioning fixed up front. `<bos>` and
/// `<sep>` are never proposed.
pub struct ModelScorer<'a> {
    params: &'a ModelParams,
    latents: Option<Tensor>,
    neighbors: Option<NeighborEncoding>,
    mode: DecodeMode,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a ModelParams, latents: Option<Tensor>, neighbors: Option<NeighborEncoding>, mode: DecodeMode) -> Self {
        Self { params, latents, neighbors, mode }
    }
}

impl NextTokenScorer for ModelScorer<'_> {
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
        let logits = decoder_forward(self.params, prefix, self.latents.as_ref(), self.neighbors.as_ref(), self.mode)?;
        let row = logits.row(logits.rows - 1);
        let allowed = |t: usize| t != BOS as usize && t != SEP as usize;
        let max = (0..VOCAB_SIZE).filter(|t| allowed(*t)).map(|t| row[t]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..VOCAB_SIZE).filter(|t| allowed(*t)).map(|t| (row[t] - max).exp()).sum::<f64>().ln();
        Ok((0..VOCAB_SIZE).map(|t| if allowed(t) { row[t] - lse } else { f64::NEG_INFINITY }).collect())
    }
}

/// Captions one image. `retrieved` is used according to `mode`.
pub fn generate_caption(
    params: &ModelParams,
    image: Option<&EmbeddingVector>,
    retrieved: Option<&RetrievalResult>,
    mode: RetrievalMode,
    cfg: &BeamConfig,
) -> Result<String, ModelError> {
    detokenize(&generate_caption_tokens(params, image, retrieved, mode, cfg)?)
}

/// Token form of [`generate_caption`], without `<bos>`, prefix or `<eos>`.
pub fn generate_caption_tokens(
    params: &ModelParams,
    image: Option<&EmbeddingVector>,
    retrieved: Option<&RetrievalResult>,
    mode: RetrievalMode,
    cfg: &BeamConfig,
) -> Result<Vec<u32>, ModelError> {
    let latents = match image {
        Some(img) => {
            let visual = super::network::lift_visual(params, img.as_slice())?;
            Some(super::network::perceiver_resample(params, &visual)?)
        }
        None => None,
    };
    let mut start = vec![BOS];
    let (neighbors, decode_mode) = match (mode, retrieved) {
        (RetrievalMode::CrossAttention, Some(r)) => {
            let toks: Vec<Vec<u32>> = r.captions().take(params.config.k_neighbors).map(tokenize).collect();
            (Some(encode_neighbors(params, &toks)?), DecodeMode::Standard)
        }
        (RetrievalMode::Prepend { n }, Some(r)) => {
            start.extend(prepend_tokens(r, n, params.config.neighbor_len));
            (None, DecodeMode::Prepend)
        }
        _ => (None, DecodeMode::Standard),
    };
    let room = params.config.max_len.saturating_sub(start.len());
    if room == 0 {
        return Err(ModelError::ContextOverflow { len: start.len() + 1, max: params.config.max_len });
    }
    let cfg = BeamConfig { max_len: cfg.max_len.min(room), ..*cfg };
    let mut scorer = ModelScorer::new(params, latents, neighbors, decode_mode);
    Ok(beam_search(&mut scorer, &start, &cfg)?.tokens)
}
