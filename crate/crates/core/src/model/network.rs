//! Forward graph of the captioner.
//!
//! Every public entry point here runs without gradients. The `graph_*`
//! helpers build the same computation on a caller-supplied [`Tape`] so the
//! training code can differentiate it.

use serde::{Deserialize, Serialize};

use super::params::{AttnIds, BlockIds, FfwIds, LnIds};
use super::tape::{Grads, NodeId, Tape};
use super::tensor::{matmul, Tensor};
use super::tokenizer::{BOS, EOS, VOCAB_SIZE};
use super::{ModelError, ModelParams};
use crate::embedding::EmbeddingVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    /// Neighbor encodings enter through the retrieval cross-attention.
    #[default]
    Standard,
    /// Retrieved captions are already part of the token sequence; any
    /// neighbor encoding is ignored.
    Prepend,
}

/// Encoded neighbor captions, `k` slots of `m` rows each.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborEncoding {
    /// `(k·m) × d_model`.
    pub tensor: Tensor,
    /// One flag per row; `false` rows are padding and never attended to.
    pub mask: Vec<bool>,
    pub k: usize,
    pub m: usize,
}

impl NeighborEncoding {
    pub fn is_fully_masked(&self) -> bool {
        !self.mask.iter().any(|b| *b)
    }

    /// Rows of slot `i`.
    pub fn slot(&self, i: usize) -> Tensor {
        self.tensor.slice_rows(i * self.m, (i + 1) * self.m)
    }
}

/// One teacher-forced training or evaluation sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Option<EmbeddingVector>,
    /// `<bos> [evidence] caption <eos> [padding]`.
    pub tokens: Vec<u32>,
    /// Index of the first token whose prediction counts towards the loss.
    pub loss_start: usize,
    /// `None` leaves the retrieval cross-attention out entirely.
    pub neighbors: Option<Vec<Vec<u32>>>,
    pub mode: DecodeMode,
}

impl Example {
    pub fn new(image: Option<EmbeddingVector>, caption: &str) -> Self {
        Self {
            image,
            tokens: super::tokenizer::tokenize_caption(caption),
            loss_start: 1,
            neighbors: None,
            mode: DecodeMode::Standard,
        }
    }

    pub fn with_neighbors(mut self, neighbors: Vec<Vec<u32>>) -> Self {
        self.neighbors = Some(neighbors);
        self
    }

    /// Inserts `prefix` after `<bos>` and switches to prepend mode; the
    /// prefix tokens are context only and do not enter the loss.
    pub fn with_prefix(mut self, prefix: &[u32]) -> Self {
        self.tokens.splice(1..1, prefix.iter().copied());
        self.loss_start = 1 + prefix.len();
        self.mode = DecodeMode::Prepend;
        self
    }
}

fn check_tokens(tokens: &[u32], max_len: usize) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::ShapeMismatch("empty token sequence".into()));
    }
    if tokens.len() > max_len {
        return Err(ModelError::ContextOverflow { len: tokens.len(), max: max_len });
    }
    match tokens.iter().find(|t| **t as usize >= VOCAB_SIZE) {
        Some(t) => Err(ModelError::InvalidTokenId(*t)),
        None => Ok(()),
    }
}

fn no_grad_mask(params: &ModelParams) -> Vec<bool> {
    vec![false; params.tensors.len()]
}

/// The fixed lift from an image embedding to `visual_tokens × d_model`.
pub fn lift_visual(params: &ModelParams, image: &[f32]) -> Result<Tensor, ModelError> {
    let cfg = &params.config;
    if image.len() != cfg.image_dim {
        return Err(ModelError::ShapeMismatch(format!("image dim {} != {}", image.len(), cfg.image_dim)));
    }
    let row = Tensor::from_vec(1, image.len(), image.iter().map(|x| f64::from(*x)).collect());
    let flat = matmul(&row, &params.visual_lift);
    Ok(Tensor::from_vec(cfg.visual_tokens, cfg.d_model, flat.data))
}

fn layer_norm(t: &mut Tape, ids: &LnIds, x: NodeId) -> NodeId {
    let (g, b) = (t.param(ids.gain), t.param(ids.bias));
    t.layer_norm(x, g, b)
}

fn attention(t: &mut Tape, ids: &AttnIds, heads: usize, xq: NodeId, kv: NodeId, causal: bool, mask: Option<Vec<bool>>) -> NodeId {
    let (wq, wk, wv, wo) = (t.param(ids.wq), t.param(ids.wk), t.param(ids.wv), t.param(ids.wo));
    let q = t.matmul(xq, wq);
    let k = t.matmul(kv, wk);
    let v = t.matmul(kv, wv);
    let a = t.attention(q, k, v, heads, causal, mask);
    t.matmul(a, wo)
}

fn feed_forward(t: &mut Tape, ids: &FfwIds, x: NodeId) -> NodeId {
    let (w1, b1, w2, b2) = (t.param(ids.w1), t.param(ids.b1), t.param(ids.w2), t.param(ids.b2));
    let h = t.matmul(x, w1);
    let h = t.add_bias(h, b1);
    let h = t.gelu(h);
    let o = t.matmul(h, w2);
    t.add_bias(o, b2)
}

/// Pre-norm self-attention block followed by a feed-forward block.
fn self_block(t: &mut Tape, ids: &BlockIds, heads: usize, x: NodeId, causal: bool, mask: Option<Vec<bool>>) -> NodeId {
    let n = layer_norm(t, &ids.ln_attn, x);
    let a = attention(t, &ids.attn, heads, n, n, causal, mask);
    let x = t.add(x, a);
    let n = layer_norm(t, &ids.ln_ffw, x);
    let f = feed_forward(t, &ids.ffw, n);
    t.add(x, f)
}

pub(crate) fn graph_perceiver(t: &mut Tape, params: &ModelParams, visual: NodeId) -> NodeId {
    let lay = &params.layout;
    let heads = params.config.n_heads;
    let mut lat = t.param(lay.latents);
    for b in &lay.perceiver_blocks {
        let n = layer_norm(t, &b.ln_attn, lat);
        let kv = t.concat_rows(vec![visual, n]);
        let a = attention(t, &b.attn, heads, n, kv, false, None);
        lat = t.add(lat, a);
        let n = layer_norm(t, &b.ln_ffw, lat);
        let f = feed_forward(t, &b.ffw, n);
        lat = t.add(lat, f);
    }
    layer_norm(t, &lay.perceiver_ln, lat)
}

/// Token ids of one neighbor window: cut at the first `<eos>` and at `m`.
fn neighbor_window(tokens: &[u32], m: usize) -> &[u32] {
    let end = tokens.iter().position(|t| *t == EOS).unwrap_or(tokens.len());
    let tokens = &tokens[..end];
    let tokens = tokens.strip_prefix(&[BOS]).unwrap_or(tokens);
    &tokens[..tokens.len().min(m)]
}

pub(crate) struct GraphEncoding {
    pub node: NodeId,
    pub mask: Vec<bool>,
}

pub(crate) fn graph_encode_neighbors(t: &mut Tape, params: &ModelParams, captions: &[Vec<u32>]) -> Result<GraphEncoding, ModelError> {
    let cfg = &params.config;
    let (k, m, d) = (cfg.k_neighbors, cfg.neighbor_len, cfg.d_model);
    if captions.len() > k {
        return Err(ModelError::TooManyNeighbors { got: captions.len(), max: k });
    }
    for c in captions {
        if let Some(bad) = c.iter().find(|t| **t as usize >= VOCAB_SIZE) {
            return Err(ModelError::InvalidTokenId(*bad));
        }
    }
    let lay = &params.layout;
    let mut parts = Vec::with_capacity(k);
    let mut mask = Vec::with_capacity(k * m);
    for slot in 0..k {
        let window = captions.get(slot).map_or(&[][..], |c| neighbor_window(c, m));
        if window.is_empty() {
            parts.push(t.constant(Tensor::zeros(m, d)));
            mask.extend(std::iter::repeat_n(false, m));
            continue;
        }
        let n = window.len();
        let ids: Vec<usize> = (0..m).map(|i| window.get(i).copied().unwrap_or(EOS) as usize).collect();
        let slot_mask: Vec<bool> = (0..m).map(|i| i < n).collect();
        let emb = t.param(lay.token_embedding);
        let tok = t.gather(emb, ids);
        let pos_table = t.param(lay.enc_pos);
        let pos = t.gather(pos_table, (0..m).collect());
        let mut x = t.add(tok, pos);
        for b in &lay.enc_blocks {
            x = self_block(t, b, cfg.n_heads, x, false, Some(slot_mask.clone()));
        }
        parts.push(layer_norm(t, &lay.enc_ln, x));
        mask.extend(slot_mask);
    }
    let node = t.concat_rows(parts);
    Ok(GraphEncoding { node, mask })
}

pub(crate) fn graph_decoder(
    t: &mut Tape,
    params: &ModelParams,
    tokens: &[u32],
    latents: Option<NodeId>,
    neighbors: Option<(NodeId, &[bool])>,
    mode: DecodeMode,
) -> Result<NodeId, ModelError> {
    let cfg = &params.config;
    check_tokens(tokens, cfg.max_len)?;
    let lay = &params.layout;
    let emb = t.param(lay.token_embedding);
    let tok = t.gather(emb, tokens.iter().map(|x| *x as usize).collect());
    let pos_table = t.param(lay.dec_pos);
    let pos = t.gather(pos_table, (0..tokens.len()).collect());
    let mut x = t.add(tok, pos);

    let memory = match (mode, neighbors) {
        (DecodeMode::Standard, Some((node, mask))) if mask.iter().any(|b| *b) => Some((node, mask.to_vec())),
        _ => None,
    };

    for l in 0..cfg.n_layers {
        if let (Some(xa), Some(lat)) = (&lay.xattn[l], latents) {
            let (aa, af) = (t.param(xa.alpha_attn), t.param(xa.alpha_ffw));
            let n = layer_norm(t, &xa.block.ln_attn, x);
            let a = attention(t, &xa.block.attn, cfg.n_heads, n, lat, false, None);
            let a = t.gate(aa, a);
            x = t.add(x, a);
            let n = layer_norm(t, &xa.block.ln_ffw, x);
            let f = feed_forward(t, &xa.block.ffw, n);
            let f = t.gate(af, f);
            x = t.add(x, f);
        }
        x = self_block(t, &lay.dec_blocks[l], cfg.n_heads, x, true, None);
        if let (Some(r), Some((mem, mask))) = (&lay.retro[l], &memory) {
            let n = layer_norm(t, &r.ln, x);
            let a = attention(t, &r.attn, cfg.n_heads, n, *mem, false, Some(mask.clone()));
            x = t.add(x, a);
        }
    }
    let n = layer_norm(t, &lay.final_ln, x);
    let (hw, hb) = (t.param(lay.head_w), t.param(lay.head_b));
    let logits = t.matmul(n, hw);
    Ok(t.add_bias(logits, hb))
}

/// Latents for an image embedding: the fixed lift followed by the perceiver.
pub(crate) fn graph_image_latents(t: &mut Tape, params: &ModelParams, image: &[f32]) -> Result<NodeId, ModelError> {
    let visual = lift_visual(params, image)?;
    let v = t.constant(visual);
    Ok(graph_perceiver(t, params, v))
}

/// Resamples any number of `d_model`-wide visual tokens to `n_latents` rows.
pub fn perceiver_resample(params: &ModelParams, visual: &Tensor) -> Result<Tensor, ModelError> {
    if visual.rows == 0 || visual.cols != params.config.d_model {
        return Err(ModelError::ShapeMismatch(format!(
            "visual tokens {:?}, expected t × {}",
            visual.shape(),
            params.config.d_model
        )));
    }
    let mask = no_grad_mask(params);
    let mut t = Tape::new(&params.tensors, Some(&mask));
    let v = t.constant(visual.clone());
    let out = graph_perceiver(&mut t, params, v);
    Ok(t.value(out).clone())
}

/// Encodes up to `k_neighbors` token sequences. Missing or empty slots are
/// zero rows with a fully false mask.
pub fn encode_neighbors(params: &ModelParams, captions: &[Vec<u32>]) -> Result<NeighborEncoding, ModelError> {
    let mask = no_grad_mask(params);
    let mut t = Tape::new(&params.tensors, Some(&mask));
    let enc = graph_encode_neighbors(&mut t, params, captions)?;
    Ok(NeighborEncoding {
        tensor: t.value(enc.node).clone(),
        mask: enc.mask,
        k: params.config.k_neighbors,
        m: params.config.neighbor_len,
    })
}

/// Logits, one row per input position.
pub fn decoder_forward(
    params: &ModelParams,
    tokens: &[u32],
    latents: Option<&Tensor>,
    neighbors: Option<&NeighborEncoding>,
    mode: DecodeMode,
) -> Result<Tensor, ModelError> {
    let d = params.config.d_model;
    if let Some(l) = latents {
        if l.cols != d || l.rows == 0 {
            return Err(ModelError::ShapeMismatch(format!("latents {:?}", l.shape())));
        }
    }
    if let Some(e) = neighbors {
        if e.tensor.cols != d || e.tensor.rows != e.mask.len() {
            return Err(ModelError::ShapeMismatch(format!("neighbor encoding {:?}", e.tensor.shape())));
        }
    }
    let mask = no_grad_mask(params);
    let mut t = Tape::new(&params.tensors, Some(&mask));
    let lat = latents.map(|l| t.constant(l.clone()));
    let mem = neighbors.map(|e| (t.constant(e.tensor.clone()), e.mask.as_slice()));
    let out = graph_decoder(&mut t, params, tokens, lat, mem, mode)?;
    Ok(t.value(out).clone())
}

/// Inputs and `(row, target)` pairs of an example after cutting at the
/// first `<eos>` that is a prediction target.
fn split_example(ex: &Example) -> Result<(&[u32], Vec<(usize, usize)>), ModelError> {
    if ex.loss_start == 0 || ex.loss_start >= ex.tokens.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "loss_start {} outside sequence of {}",
            ex.loss_start,
            ex.tokens.len()
        )));
    }
    let end = ex.tokens[ex.loss_start..]
        .iter()
        .position(|t| *t == EOS)
        .map_or(ex.tokens.len() - 1, |p| ex.loss_start + p);
    let inputs = &ex.tokens[..end];
    let targets = (ex.loss_start..=end).map(|i| (i - 1, ex.tokens[i] as usize)).collect();
    Ok((inputs, targets))
}

pub(crate) fn graph_loss(t: &mut Tape, params: &ModelParams, ex: &Example) -> Result<NodeId, ModelError> {
    let (inputs, targets) = split_example(ex)?;
    let latents = ex.image.as_ref().map(|img| graph_image_latents(t, params, img.as_slice())).transpose()?;
    let enc = match (&ex.neighbors, ex.mode) {
        (Some(n), DecodeMode::Standard) => Some(graph_encode_neighbors(t, params, n)?),
        _ => None,
    };
    let mem = enc.as_ref().map(|e| (e.node, e.mask.as_slice()));
    let logits = graph_decoder(t, params, inputs, latents, mem, ex.mode)?;
    Ok(t.cross_entropy(logits, targets))
}

/// Mean teacher-forced cross-entropy of `ex`.
pub fn loss(params: &ModelParams, ex: &Example) -> Result<f64, ModelError> {
    let mask = no_grad_mask(params);
    let mut t = Tape::new(&params.tensors, Some(&mask));
    let node = graph_loss(&mut t, params, ex)?;
    Ok(t.value(node).data[0])
}

/// Loss and gradients for every parameter in a non-frozen group.
pub fn loss_and_grads(params: &ModelParams, ex: &Example) -> Result<(f64, Grads), ModelError> {
    let mask = params.trainable_mask();
    let mut t = Tape::new(&params.tensors, Some(&mask));
    let node = graph_loss(&mut t, params, ex)?;
    let value = t.value(node).data[0];
    Ok((value, t.backward(node)))
}
