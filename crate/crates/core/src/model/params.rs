//! Parameter storage, grouping and initialization.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::tokenizer::VOCAB_SIZE;
use super::{ModelConfig, ModelError};

/// Freeze-policy unit. Every parameter tensor belongs to exactly one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    TokenEmbedding,
    DecoderBlocks,
    XattnBlocks,
    RetroBlocks,
    TextEncoderBlocks,
    Perceiver,
    OutputHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::TokenEmbedding,
        ParamGroup::DecoderBlocks,
        ParamGroup::XattnBlocks,
        ParamGroup::RetroBlocks,
        ParamGroup::TextEncoderBlocks,
        ParamGroup::Perceiver,
        ParamGroup::OutputHead,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamGroup::TokenEmbedding => "token_embedding",
            ParamGroup::DecoderBlocks => "decoder_blocks",
            ParamGroup::XattnBlocks => "xattn_blocks",
            ParamGroup::RetroBlocks => "retro_blocks",
            ParamGroup::TextEncoderBlocks => "text_encoder_blocks",
            ParamGroup::Perceiver => "perceiver",
            ParamGroup::OutputHead => "output_head",
        };
        f.write_str(s)
    }
}

/// Which groups train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreezePolicy {
    /// Language-model parts frozen; perceiver and both cross-attention
    /// families train.
    Pretrain,
    /// Everything trains.
    Finetune,
}

impl FreezePolicy {
    pub fn frozen(self, group: ParamGroup) -> bool {
        match self {
            FreezePolicy::Finetune => false,
            FreezePolicy::Pretrain => matches!(
                group,
                ParamGroup::TokenEmbedding | ParamGroup::DecoderBlocks | ParamGroup::TextEncoderBlocks | ParamGroup::OutputHead
            ),
        }
    }
}

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LnIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FfwIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Pre-norm self-attention + feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BlockIds {
    pub ln_attn: LnIds,
    pub attn: AttnIds,
    pub ln_ffw: LnIds,
    pub ffw: FfwIds,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct XattnIds {
    pub block: BlockIds,
    pub alpha_attn: ParamId,
    pub alpha_ffw: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RetroIds {
    pub ln: LnIds,
    pub attn: AttnIds,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub token_embedding: ParamId,
    pub dec_pos: ParamId,
    pub dec_blocks: Vec<BlockIds>,
    pub xattn: Vec<Option<XattnIds>>,
    pub retro: Vec<Option<RetroIds>>,
    pub enc_pos: ParamId,
    pub enc_blocks: Vec<BlockIds>,
    pub enc_ln: LnIds,
    pub latents: ParamId,
    pub perceiver_blocks: Vec<BlockIds>,
    pub perceiver_ln: LnIds,
    pub final_ln: LnIds,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Shape, group and name of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
}

enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

struct Builder {
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, name: String, group: ParamGroup, rows: usize, cols: usize, init: Init) -> ParamId {
        let data = match init {
            Init::Zeros => vec![0.0; rows * cols],
            Init::Ones => vec![1.0; rows * cols],
            Init::Normal(std) => {
                let n = Normal::new(0.0, std).expect("valid std");
                (0..rows * cols).map(|_| n.sample(&mut self.rng)).collect()
            }
        };
        self.specs.push(ParamSpec { name, group, rows, cols });
        self.tensors.push(Tensor::from_vec(rows, cols, data));
        self.tensors.len() - 1
    }

    fn ln(&mut self, name: &str, group: ParamGroup, d: usize) -> LnIds {
        LnIds {
            gain: self.add(format!("{name}.gain"), group, 1, d, Init::Ones),
            bias: self.add(format!("{name}.bias"), group, 1, d, Init::Zeros),
        }
    }

    fn attn(&mut self, name: &str, group: ParamGroup, d: usize) -> AttnIds {
        let std = 1.0 / (d as f64).sqrt();
        AttnIds {
            wq: self.add(format!("{name}.wq"), group, d, d, Init::Normal(std)),
            wk: self.add(format!("{name}.wk"), group, d, d, Init::Normal(std)),
            wv: self.add(format!("{name}.wv"), group, d, d, Init::Normal(std)),
            wo: self.add(format!("{name}.wo"), group, d, d, Init::Normal(std)),
        }
    }

    fn ffw(&mut self, name: &str, group: ParamGroup, d: usize, mult: usize) -> FfwIds {
        let h = d * mult;
        FfwIds {
            w1: self.add(format!("{name}.w1"), group, d, h, Init::Normal(1.0 / (d as f64).sqrt())),
            b1: self.add(format!("{name}.b1"), group, 1, h, Init::Zeros),
            w2: self.add(format!("{name}.w2"), group, h, d, Init::Normal(1.0 / (h as f64).sqrt())),
            b2: self.add(format!("{name}.b2"), group, 1, d, Init::Zeros),
        }
    }

    fn block(&mut self, name: &str, group: ParamGroup, d: usize, mult: usize) -> BlockIds {
        BlockIds {
            ln_attn: self.ln(&format!("{name}.ln_attn"), group, d),
            attn: self.attn(&format!("{name}.attn"), group, d),
            ln_ffw: self.ln(&format!("{name}.ln_ffw"), group, d),
            ffw: self.ffw(&format!("{name}.ffw"), group, d, mult),
        }
    }
}

/// Every trainable tensor of the model plus the fixed visual lift.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor>,
    specs: Vec<ParamSpec>,
    frozen: [bool; 7],
    /// `image_dim × (visual_tokens · d_model)`; stands in for a frozen image
    /// encoder and is never trained.
    pub visual_lift: Tensor,
    pub(crate) layout: Layout,
}

const EMBED_STD: f64 = 0.1;
const HEAD_STD: f64 = 0.02;

impl ModelParams {
    /// Fresh parameters: cross-attention gates at zero, everything else
    /// seeded from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let mult = config.ffw_mult;
        let mut b = Builder { specs: Vec::new(), tensors: Vec::new(), rng: ChaCha8Rng::seed_from_u64(config.seed) };
        use ParamGroup::*;

        let token_embedding = b.add("token_embedding".into(), TokenEmbedding, VOCAB_SIZE, d, Init::Normal(EMBED_STD));
        let dec_pos = b.add("decoder.pos".into(), DecoderBlocks, config.max_len, d, Init::Normal(EMBED_STD));
        let mut dec_blocks = Vec::new();
        let mut xattn = Vec::new();
        let mut retro = Vec::new();
        for l in 0..config.n_layers {
            xattn.push(config.has_xattn(l).then(|| XattnIds {
                block: b.block(&format!("xattn.{l}"), XattnBlocks, d, mult),
                alpha_attn: b.add(format!("xattn.{l}.alpha_attn"), XattnBlocks, 1, 1, Init::Zeros),
                alpha_ffw: b.add(format!("xattn.{l}.alpha_ffw"), XattnBlocks, 1, 1, Init::Zeros),
            }));
            dec_blocks.push(b.block(&format!("decoder.{l}"), DecoderBlocks, d, mult));
            retro.push(config.has_retro(l).then(|| RetroIds {
                ln: b.ln(&format!("retro.{l}.ln"), RetroBlocks, d),
                attn: b.attn(&format!("retro.{l}.attn"), RetroBlocks, d),
            }));
        }
        let enc_pos = b.add("encoder.pos".into(), TextEncoderBlocks, config.neighbor_len, d, Init::Normal(EMBED_STD));
        let enc_blocks = (0..config.encoder_layers)
            .map(|l| b.block(&format!("encoder.{l}"), TextEncoderBlocks, d, mult))
            .collect();
        let enc_ln = b.ln("encoder.ln_out", TextEncoderBlocks, d);
        let latents = b.add("perceiver.latents".into(), Perceiver, config.n_latents, d, Init::Normal(1.0));
        let perceiver_blocks = (0..config.perceiver_layers)
            .map(|l| b.block(&format!("perceiver.{l}"), Perceiver, d, mult))
            .collect();
        let perceiver_ln = b.ln("perceiver.ln_out", Perceiver, d);
        let final_ln = b.ln("head.ln", OutputHead, d);
        let head_w = b.add("head.w".into(), OutputHead, d, VOCAB_SIZE, Init::Normal(HEAD_STD));
        let head_b = b.add("head.b".into(), OutputHead, 1, VOCAB_SIZE, Init::Zeros);

        let layout = Layout {
            token_embedding,
            dec_pos,
            dec_blocks,
            xattn,
            retro,
            enc_pos,
            enc_blocks,
            enc_ln,
            latents,
            perceiver_blocks,
            perceiver_ln,
            final_ln,
            head_w,
            head_b,
        };

        // Separate stream so the lift does not depend on the layer count.
        let mut lift_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_11F7);
        let lift_cols = config.visual_tokens * d;
        let visual_lift = Tensor::from_vec(
            config.image_dim,
            lift_cols,
            (0..config.image_dim * lift_cols).map(|_| StandardNormal.sample(&mut lift_rng)).collect(),
        );

        Ok(Self { config: config.clone(), tensors: b.tensors, specs: b.specs, frozen: [false; 7], visual_lift, layout })
    }

    /// Rebuilds parameters from stored tensors, checking shapes against the
    /// layout implied by `config`.
    pub fn from_parts(config: &ModelConfig, tensors: Vec<Tensor>, visual_lift: Tensor, frozen: [bool; 7]) -> Result<Self, ModelError> {
        let mut p = Self::init(config)?;
        if tensors.len() != p.tensors.len() {
            return Err(ModelError::ShapeMismatch(format!("expected {} tensors, got {}", p.tensors.len(), tensors.len())));
        }
        for (spec, t) in p.specs.iter().zip(&tensors) {
            if (spec.rows, spec.cols) != t.shape() {
                return Err(ModelError::ShapeMismatch(format!("{}: expected {}x{}, got {:?}", spec.name, spec.rows, spec.cols, t.shape())));
            }
        }
        if visual_lift.shape() != p.visual_lift.shape() {
            return Err(ModelError::ShapeMismatch("visual lift".into()));
        }
        p.tensors = tensors;
        p.visual_lift = visual_lift;
        p.frozen = frozen;
        Ok(p)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn group_of(&self, p: ParamId) -> ParamGroup {
        self.specs[p].group
    }

    pub fn ids_in(&self, group: ParamGroup) -> impl Iterator<Item = ParamId> + '_ {
        self.specs.iter().enumerate().filter(move |(_, s)| s.group == group).map(|(i, _)| i)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.frozen[group.index()]
    }

    pub fn frozen_flags(&self) -> [bool; 7] {
        self.frozen
    }

    pub fn set_frozen(&mut self, group: ParamGroup, frozen: bool) {
        self.frozen[group.index()] = frozen;
    }

    pub fn apply_policy(&mut self, policy: FreezePolicy) {
        for g in ParamGroup::ALL {
            self.frozen[g.index()] = policy.frozen(g);
        }
    }

    /// Per-tensor trainability derived from the group flags.
    pub fn trainable_mask(&self) -> Vec<bool> {
        self.specs.iter().map(|s| !self.frozen[s.group.index()]).collect()
    }

    pub fn token_embedding(&self) -> &Tensor {
        &self.tensors[self.layout.token_embedding]
    }

    pub fn token_embedding_mut(&mut self) -> &mut Tensor {
        &mut self.tensors[self.layout.token_embedding]
    }

    /// All `(alpha_attn, alpha_ffw)` gate values, one pair per xattn block.
    pub fn gates(&self) -> Vec<(f64, f64)> {
        self.layout
            .xattn
            .iter()
            .flatten()
            .map(|x| (self.tensors[x.alpha_attn].data[0], self.tensors[x.alpha_ffw].data[0]))
            .collect()
    }

    pub fn set_gates(&mut self, value: f64) {
        let ids: Vec<(ParamId, ParamId)> = self.layout.xattn.iter().flatten().map(|x| (x.alpha_attn, x.alpha_ffw)).collect();
        for (a, f) in ids {
            self.tensors[a].data[0] = value;
            self.tensors[f].data[0] = value;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gates_start_at_zero() {
        let p = ModelParams::init(&ModelConfig::default()).unwrap();
        let gates = p.gates();
        assert_eq!(gates.len(), 2);
        assert!(gates.iter().all(|g| *g == (0.0, 0.0)));
    }

    #[test]
    fn every_group_is_populated() {
        let p = ModelParams::init(&ModelConfig::default()).unwrap();
        for g in ParamGroup::ALL {
            assert!(p.ids_in(g).count() > 0, "{g} empty");
        }
    }

    #[test]
    fn pretrain_policy_freezes_language_model() {
        let mut p = ModelParams::init(&ModelConfig::small()).unwrap();
        p.apply_policy(FreezePolicy::Pretrain);
        assert!(p.is_frozen(ParamGroup::TokenEmbedding));
        assert!(p.is_frozen(ParamGroup::DecoderBlocks));
        assert!(p.is_frozen(ParamGroup::TextEncoderBlocks));
        assert!(!p.is_frozen(ParamGroup::Perceiver));
        assert!(!p.is_frozen(ParamGroup::XattnBlocks));
        assert!(!p.is_frozen(ParamGroup::RetroBlocks));
        p.apply_policy(FreezePolicy::Finetune);
        assert!(ParamGroup::ALL.iter().all(|g| !p.is_frozen(*g)));
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::init(&ModelConfig::small()).unwrap();
        let b = ModelParams::init(&ModelConfig::small()).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(&ModelConfig { seed: 1, ..ModelConfig::small() }).unwrap();
        assert_ne!(a.tensors, c.tensors);
    }

    #[test]
    fn bad_head_split_rejected() {
        let cfg = ModelConfig { d_model: 10, n_heads: 3, ..ModelConfig::default() };
        assert!(matches!(ModelParams::init(&cfg), Err(ModelError::InvalidConfig(_))));
    }
}
