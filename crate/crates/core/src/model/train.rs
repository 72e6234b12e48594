//! Teacher-forced training with Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{loss, loss_and_grads, Example};
use super::params::FreezePolicy;
use super::tape::Grads;
use super::tensor::Tensor;
use super::tokenizer::tokenize;
use super::{ModelError, ModelParams};
use crate::embedding::EmbeddingVector;
use crate::index::Index;
use crate::seed::split;
use crate::retriever::{apply_query_dropout, prepend_tokens, retrieve_filtered, FilterPolicy, RetrievalQuery, RetrievalResult};

/// An image with its reference caption.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub id: u64,
    pub image: EmbeddingVector,
    pub caption: String,
}

/// How retrieved captions reach the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    #[default]
    None,
    /// Encoded neighbors feed the retrieval cross-attention.
    CrossAttention,
    /// The top neighbors are written into the token sequence.
    Prepend { n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub policy: FreezePolicy,
    pub retrieval: RetrievalMode,
    pub filter: FilterPolicy,
    /// Maximum per-token drop probability of the query-dropout baseline;
    /// zero disables it.
    pub query_dropout: f64,
    /// Feed the image through the perceiver. Off gives a caption-only
    /// language model.
    pub use_image: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1e-3,
            batch_size: 1,
            seed: 0,
            policy: FreezePolicy::Finetune,
            retrieval: RetrievalMode::None,
            filter: FilterPolicy::default(),
            query_dropout: 0.0,
            use_image: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Mean batch loss of every step, in order.
    pub losses: Vec<f64>,
    pub steps: u64,
    /// Position of the shuffling stream when training stopped.
    pub rng_word_pos: u128,
}

/// Adam with bias correction and a fixed learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros = || params.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros(), v: zeros() }
    }

    /// Updates every non-frozen tensor that has a gradient.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Grads) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let trainable = params.trainable_mask();
        for (i, tensor) in params.tensors.iter_mut().enumerate() {
            let Some(g) = grads.get(i) else { continue };
            if !trainable[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            for j in 0..g.data.len() {
                let gj = g.data[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                tensor.data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Retrieval for a training pair: the pair's own id and caption are the
/// filter targets.
pub fn training_retrieval(
    index: &Index,
    pair: &TrainingPair,
    k: usize,
    filter: &FilterPolicy,
) -> Result<RetrievalResult, ModelError> {
    let query = RetrievalQuery::new(pair.image.clone()).with_image_id(pair.id).with_ground_truth(pair.caption.clone());
    retrieve_filtered(index, &query, k, filter).map_err(|e| ModelError::InvalidTraining(e.to_string()))
}

/// Assembles the example for `caption` conditioned on `image` and the
/// retrieved neighbors according to `mode`.
pub fn make_example(
    params: &ModelParams,
    image: Option<&EmbeddingVector>,
    caption: &str,
    retrieved: Option<&RetrievalResult>,
    mode: RetrievalMode,
    dropout: Option<(f64, u64)>,
) -> Result<Example, ModelError> {
    let ex = Example::new(image.cloned(), caption);
    let Some(result) = retrieved else { return Ok(ex) };
    let cfg = &params.config;
    Ok(match mode {
        RetrievalMode::None => ex,
        RetrievalMode::CrossAttention => {
            let mut toks: Vec<Vec<u32>> = result.captions().take(cfg.k_neighbors).map(tokenize).collect();
            if let Some((p, seed)) = dropout.filter(|(p, _)| *p > 0.0) {
                let mut trimmed = result.clone();
                trimmed.neighbors.truncate(toks.len());
                toks = apply_query_dropout(&trimmed, &toks, p, seed).map_err(|e| ModelError::InvalidTraining(e.to_string()))?;
            }
            ex.with_neighbors(toks)
        }
        RetrievalMode::Prepend { n } => ex.with_prefix(&prepend_tokens(result, n, cfg.neighbor_len)),
    })
}

/// Seed of the dropout draw for sample `idx` at `step`.
fn dropout_seed(seed: u64, step: u64, idx: usize) -> u64 {
    split(split(seed, step), idx as u64)
}

/// Trains `params` in place.
///
/// Neighbors are retrieved once per pair up front; query dropout, when on,
/// is redrawn every time a pair is visited. `on_log` sees one record per
/// step.
pub fn train(
    params: &mut ModelParams,
    pairs: &[TrainingPair],
    index: Option<&Index>,
    cfg: &TrainConfig,
    on_log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome, ModelError> {
    if pairs.is_empty() {
        return Err(ModelError::InvalidTraining("no training pairs".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(ModelError::InvalidTraining("batch_size and lr must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.query_dropout) {
        return Err(ModelError::InvalidTraining(format!("query_dropout {} outside [0, 1]", cfg.query_dropout)));
    }
    let retrieved: Vec<Option<RetrievalResult>> = match (cfg.retrieval, index) {
        (RetrievalMode::None, _) => vec![None; pairs.len()],
        (_, None) => return Err(ModelError::InvalidTraining("retrieval mode needs an index".into())),
        (mode, Some(index)) => {
            let k = match mode {
                RetrievalMode::Prepend { n } => n.max(1),
                _ => params.config.k_neighbors,
            };
            pairs.iter().map(|p| training_retrieval(index, p, k, &cfg.filter).map(Some)).collect::<Result<_, _>>()?
        }
    };
    // Static examples; query dropout rebuilds its own per visit.
    let dynamic = cfg.query_dropout > 0.0 && cfg.retrieval == RetrievalMode::CrossAttention;
    let build = |params: &ModelParams, i: usize, dropout: Option<(f64, u64)>| {
        let image = cfg.use_image.then_some(&pairs[i].image);
        make_example(params, image, &pairs[i].caption, retrieved[i].as_ref(), cfg.retrieval, dropout)
    };
    let examples: Vec<Example> = (0..pairs.len()).map(|i| build(params, i, None)).collect::<Result<_, _>>()?;

    params.apply_policy(cfg.policy);
    let mut adam = Adam::new(params, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.steps as usize);

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut total = Grads::default();
        let mut batch_loss = 0.0;
        for &i in &batch {
            let owned;
            let ex = if dynamic {
                owned = build(params, i, Some((cfg.query_dropout, dropout_seed(cfg.seed, step, i))))?;
                &owned
            } else {
                &examples[i]
            };
            let (l, g) = loss_and_grads(params, ex)?;
            batch_loss += l;
            total.accumulate(g);
        }
        let scale = 1.0 / batch.len() as f64;
        batch_loss *= scale;
        if !batch_loss.is_finite() {
            return Err(ModelError::NonFiniteLoss { step });
        }
        total.scale(scale);
        adam.step(params, &total);
        losses.push(batch_loss);
        on_log(&LogRecord { step, loss: batch_loss, lr: cfg.lr });
    }
    Ok(TrainOutcome { losses, steps: cfg.steps, rng_word_pos: rng.get_word_pos() })
}

/// Mean per-example loss.
pub fn mean_loss(params: &ModelParams, examples: &[Example]) -> Result<f64, ModelError> {
    if examples.is_empty() {
        return Err(ModelError::InvalidTraining("no examples".into()));
    }
    let mut sum = 0.0;
    for ex in examples {
        sum += loss(params, ex)?;
    }
    Ok(sum / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::random_pairs;
    use crate::model::{ModelConfig, ParamGroup};

    fn pairs(n: usize) -> Vec<TrainingPair> {
        random_pairs(n, 32, 7)
            .records
            .into_iter()
            .map(|r| TrainingPair { id: r.id, image: r.embedding, caption: r.caption })
            .collect()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ModelParams::init(&ModelConfig::small()).unwrap();
        let before = p.tensors[0].data[0];
        let mut g = Grads(vec![None; p.tensors.len()]);
        let mut t = Tensor::zeros(p.tensors[0].rows, p.tensors[0].cols);
        t.data[0] = 3.0;
        g.0[0] = Some(t);
        let mut adam = Adam::new(&p, 0.01);
        adam.step(&mut p, &g);
        assert!((before - p.tensors[0].data[0] - 0.01).abs() < 1e-9);
        assert_eq!(p.tensors[0].data[1], ModelParams::init(&ModelConfig::small()).unwrap().tensors[0].data[1]);
    }

    #[test]
    fn deterministic_and_freezes() {
        let data = pairs(4);
        let cfg = TrainConfig { steps: 5, policy: FreezePolicy::Pretrain, batch_size: 2, ..Default::default() };
        let run = || {
            let mut p = ModelParams::init(&ModelConfig::small()).unwrap();
            let out = train(&mut p, &data, None, &cfg, &mut |_| {}).unwrap();
            (p, out)
        };
        let (a, oa) = run();
        let (b, ob) = run();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&oa.losses), bits(&ob.losses));
        assert_eq!(a.tensors, b.tensors);

        let init = ModelParams::init(&ModelConfig::small()).unwrap();
        for g in [ParamGroup::TokenEmbedding, ParamGroup::DecoderBlocks, ParamGroup::TextEncoderBlocks] {
            for id in a.ids_in(g) {
                assert_eq!(a.tensors[id], init.tensors[id]);
            }
        }
        let moved = a.ids_in(ParamGroup::Perceiver).any(|id| a.tensors[id] != init.tensors[id]);
        assert!(moved);
    }

    #[test]
    fn loss_goes_down() {
        let data = pairs(2);
        let mut p = ModelParams::init(&ModelConfig::small()).unwrap();
        let cfg = TrainConfig { steps: 60, lr: 3e-3, ..Default::default() };
        let out = train(&mut p, &data, None, &cfg, &mut |_| {}).unwrap();
        assert!(out.losses.last().unwrap() < &(out.losses[0] * 0.7));
    }

    #[test]
    fn nonfinite_loss_reports_step() {
        let data = pairs(2);
        let mut p = ModelParams::init(&ModelConfig::small()).unwrap();
        let id = p.ids_in(ParamGroup::OutputHead).nth(2).unwrap();
        p.tensors[id].data[0] = f64::NAN;
        let cfg = TrainConfig { steps: 3, ..Default::default() };
        assert!(matches!(train(&mut p, &data, None, &cfg, &mut |_| {}), Err(ModelError::NonFiniteLoss { step: 1 })));
    }
}
