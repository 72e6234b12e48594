//! Retrieval ablations on a captioned corpus.
//!
//! [`run_ablation`] splits a corpus by caption (every record sharing a
//! caption lands on the same side), builds the retrieval index from the
//! training side, trains one model per arm and scores each on the held-out
//! side. At evaluation time every arm retrieves with the image-identity
//! filter only, since held-out captions are unknown.
//!
//! [`retrieval_gain`] compares held-out loss with and without neighbor
//! cross-attention on a corpus whose visual groups share a caption suffix.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::synthetic::suffix_shared_corpus;
use crate::corpus::Corpus;
use crate::index::{ImageTextRecord, Index, IndexConfig};
use crate::metrics::{bleu4, cider_d, EvalPair};
use crate::model::beam::generate_caption;
use crate::model::train::{make_example, mean_loss, RetrievalMode};
use crate::model::{train, BeamConfig, FreezePolicy, ModelConfig, ModelError, ModelParams, TrainConfig, TrainingPair};
use crate::retriever::{retrieve_filtered, FilterPolicy, RetrievalQuery, RetrievalResult};
use crate::seed::split;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Neighbor cross-attention, training retrieval filtered by image and
    /// caption. Doubles as the cross-attention arm of the prepend
    /// comparison.
    Filter,
    /// Neighbor cross-attention on plain k-NN.
    NoFilter,
    /// Plain k-NN with similarity-scaled token dropout on the neighbors.
    QueryDropout,
    /// Filtered neighbors written ahead of the caption.
    PrependTop2,
    /// Image only.
    NoRetrieval,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Filter, Arm::NoFilter, Arm::QueryDropout, Arm::PrependTop2, Arm::NoRetrieval];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Filter => "filter",
            Arm::NoFilter => "no_filter",
            Arm::QueryDropout => "query_dropout",
            Arm::PrependTop2 => "prepend_top2",
            Arm::NoRetrieval => "no_retrieval",
        }
    }

    fn mode(self) -> RetrievalMode {
        match self {
            Arm::Filter | Arm::NoFilter | Arm::QueryDropout => RetrievalMode::CrossAttention,
            Arm::PrependTop2 => RetrievalMode::Prepend { n: 2 },
            Arm::NoRetrieval => RetrievalMode::None,
        }
    }

    fn training_filter(self) -> FilterPolicy {
        match self {
            Arm::NoFilter | Arm::QueryDropout => FilterPolicy::none(),
            _ => FilterPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Fraction of distinct captions whose records are held out.
    pub heldout_fraction: f64,
    pub model: ModelConfig,
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub query_dropout: f64,
    pub beam: BeamConfig,
    pub arms: Vec<Arm>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            heldout_fraction: 0.2,
            model: ModelConfig { k_neighbors: 1, ..ModelConfig::small() },
            steps: 3000,
            lr: 3e-3,
            batch_size: 1,
            query_dropout: 0.3,
            beam: BeamConfig::default(),
            arms: Arm::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    /// Generated caption byte-equal to the top-1 retrieved caption.
    pub exact_copy_rate: f64,
    pub heldout_loss: f64,
    pub bleu4: f64,
    pub cider_d: f64,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub n_train: usize,
    pub n_heldout: usize,
    pub arms: Vec<ArmResult>,
}

impl AblationRun {
    pub fn arm(&self, arm: Arm) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == arm)
    }
}

/// Record indices of the training and held-out sides. Records with equal
/// captions always share a side.
pub fn split_by_caption(corpus: &Corpus, heldout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in corpus.records.iter().enumerate() {
        groups.entry(r.caption.as_str()).or_default().push(i);
    }
    let mut keys: Vec<&str> = groups.keys().copied().collect();
    keys.sort_unstable();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_held = ((keys.len() as f64) * heldout_fraction).round() as usize;
    let n_held = n_held.clamp(1, keys.len().saturating_sub(1).max(1));
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, k) in keys.iter().enumerate() {
        if i < n_held {
            held.extend(&groups[k]);
        } else {
            train.extend(&groups[k]);
        }
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

fn to_pair(r: &ImageTextRecord) -> TrainingPair {
    TrainingPair { id: r.id, image: r.embedding.clone(), caption: r.caption.clone() }
}

fn map_index_err(e: impl std::fmt::Display) -> ModelError {
    ModelError::InvalidTraining(e.to_string())
}

/// Retrieval used when scoring a held-out record.
fn eval_retrieval(index: &Index, record: &ImageTextRecord, k: usize) -> Result<RetrievalResult, ModelError> {
    let q = RetrievalQuery::new(record.embedding.clone()).with_image_id(record.id);
    retrieve_filtered(index, &q, k, &FilterPolicy::image_only()).map_err(map_index_err)
}

/// Runs every configured arm on `corpus` with one root seed.
pub fn run_ablation(corpus: &Corpus, cfg: &AblationConfig, seed: u64) -> Result<AblationRun, ModelError> {
    let model_cfg = ModelConfig { image_dim: corpus.dim, seed: split(seed, 1), ..cfg.model.clone() };
    model_cfg.validate()?;
    let (train_ids, held_ids) = split_by_caption(corpus, cfg.heldout_fraction, split(seed, 2));
    if train_ids.is_empty() || held_ids.is_empty() {
        return Err(ModelError::InvalidTraining("corpus too small to split".into()));
    }
    let train_records: Vec<ImageTextRecord> = train_ids.iter().map(|i| corpus.records[*i].clone()).collect();
    let index = Index::build(train_records.clone(), IndexConfig::exact(corpus.dim)).map_err(map_index_err)?;
    let pairs: Vec<TrainingPair> = train_records.iter().map(to_pair).collect();
    let k = model_cfg.k_neighbors.max(2);
    let held: Vec<(&ImageTextRecord, RetrievalResult)> = held_ids
        .iter()
        .map(|i| {
            let r = &corpus.records[*i];
            eval_retrieval(&index, r, k).map(|res| (r, res))
        })
        .collect::<Result<_, _>>()?;

    let mut arms = Vec::with_capacity(cfg.arms.len());
    for &arm in &cfg.arms {
        let mut params = ModelParams::init(&model_cfg)?;
        let tc = TrainConfig {
            steps: cfg.steps,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            seed: split(seed, 3),
            policy: FreezePolicy::Finetune,
            retrieval: arm.mode(),
            filter: arm.training_filter(),
            query_dropout: if arm == Arm::QueryDropout { cfg.query_dropout } else { 0.0 },
            use_image: true,
        };
        let outcome = train(&mut params, &pairs, Some(&index), &tc, &mut |_| {})?;
        let mut examples = Vec::with_capacity(held.len());
        let mut eval_pairs = Vec::with_capacity(held.len());
        let mut copies = 0usize;
        for (rec, res) in &held {
            examples.push(make_example(&params, Some(&rec.embedding), &rec.caption, Some(res), arm.mode(), None)?);
            let generated = generate_caption(&params, Some(&rec.embedding), Some(res), arm.mode(), &cfg.beam)?;
            if res.neighbors.first().is_some_and(|n| n.caption == generated) {
                copies += 1;
            }
            eval_pairs.push(EvalPair::new(generated, [rec.caption.clone()]));
        }
        let metric_err = |e: crate::metrics::MetricsError| ModelError::InvalidTraining(e.to_string());
        arms.push(ArmResult {
            arm,
            exact_copy_rate: copies as f64 / held.len() as f64,
            heldout_loss: mean_loss(&params, &examples)?,
            bleu4: bleu4(&eval_pairs).map_err(metric_err)?,
            cider_d: cider_d(&eval_pairs).map_err(metric_err)?,
            final_train_loss: outcome.losses.last().copied().unwrap_or(f64::NAN),
        });
        log::info!("ablation seed {seed}: arm {} done", arm.name());
    }
    Ok(AblationRun { seed, n_train: pairs.len(), n_heldout: held.len(), arms })
}

/// Aligned text table, one row per (seed, arm).
pub fn render_table(runs: &[AblationRun]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<6} {:<14} {:>10} {:>12} {:>8} {:>8}",
        "seed", "arm", "copy_rate", "heldout_loss", "bleu4", "cider_d"
    );
    for run in runs {
        for a in &run.arms {
            let _ = writeln!(
                out,
                "{:<6} {:<14} {:>10.4} {:>12.4} {:>8.4} {:>8.4}",
                run.seed,
                a.arm.name(),
                a.exact_copy_rate,
                a.heldout_loss,
                a.bleu4,
                a.cider_d
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GainConfig {
    pub groups: usize,
    pub per_group: usize,
    pub dim: usize,
    pub model: ModelConfig,
    pub steps: u64,
    pub lr: f64,
}

impl Default for GainConfig {
    fn default() -> Self {
        Self { groups: 40, per_group: 4, dim: 32, model: ModelConfig::small(), steps: 1000, lr: 2e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainResult {
    pub seed: u64,
    pub heldout_loss_with_retrieval: f64,
    pub heldout_loss_without_retrieval: f64,
}

/// Held-out loss with and without neighbor cross-attention on the
/// suffix-shared corpus. One member of every group is held out, so each
/// held-out image has group-mates in the index.
pub fn retrieval_gain(cfg: &GainConfig, seed: u64) -> Result<GainResult, ModelError> {
    let (corpus, groups) = suffix_shared_corpus(cfg.groups, cfg.per_group, cfg.dim, split(seed, 10));
    let mut seen = std::collections::HashSet::new();
    let (mut train_recs, mut held) = (Vec::new(), Vec::new());
    for (r, g) in corpus.records.iter().zip(&groups) {
        if seen.insert(*g) {
            held.push(r.clone());
        } else {
            train_recs.push(r.clone());
        }
    }
    let index = Index::build(train_recs.clone(), IndexConfig::exact(cfg.dim)).map_err(map_index_err)?;
    let pairs: Vec<TrainingPair> = train_recs.iter().map(to_pair).collect();
    let model_cfg = ModelConfig { image_dim: cfg.dim, seed: split(seed, 11), ..cfg.model.clone() };
    let k = model_cfg.k_neighbors;

    let mut losses = [0.0; 2];
    for (slot, mode) in [RetrievalMode::CrossAttention, RetrievalMode::None].into_iter().enumerate() {
        let mut params = ModelParams::init(&model_cfg)?;
        let tc = TrainConfig {
            steps: cfg.steps,
            lr: cfg.lr,
            seed: split(seed, 12),
            retrieval: mode,
            ..TrainConfig::default()
        };
        train(&mut params, &pairs, Some(&index), &tc, &mut |_| {})?;
        let examples = held
            .iter()
            .map(|r| {
                let res = eval_retrieval(&index, r, k)?;
                make_example(&params, Some(&r.embedding), &r.caption, Some(&res), mode, None)
            })
            .collect::<Result<Vec<_>, _>>()?;
        losses[slot] = mean_loss(&params, &examples)?;
    }
    Ok(GainResult { seed, heldout_loss_with_retrieval: losses[0], heldout_loss_without_retrieval: losses[1] })
}
