use serde::{Deserialize, Serialize};

use super::ModelError;

/// Hyperparameters of the retrieval-augmented decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffw_mult: usize,
    /// Perceiver output length.
    pub n_latents: usize,
    pub k_neighbors: usize,
    /// Per-neighbor window `m`, in tokens.
    pub neighbor_len: usize,
    /// Decoder layers `l` with `l % xattn_every == 0` get a gated visual
    /// cross-attention block.
    pub xattn_every: usize,
    /// Decoder layers `l` with `l % retro_every == 0` get a neighbor
    /// cross-attention block.
    pub retro_every: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Dimension of the image embeddings fed to the visual lift.
    pub image_dim: usize,
    /// Pseudo visual tokens produced by the fixed lift.
    pub visual_tokens: usize,
    pub perceiver_layers: usize,
    pub encoder_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            ffw_mult: 4,
            n_latents: 8,
            k_neighbors: 2,
            neighbor_len: 16,
            xattn_every: 2,
            retro_every: 2,
            max_len: 64,
            seed: 0,
            image_dim: 64,
            visual_tokens: 4,
            perceiver_layers: 2,
            encoder_layers: 2,
        }
    }
}

impl ModelConfig {
    /// A smaller configuration for experiments that train many models.
    pub fn small() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            ffw_mult: 2,
            n_latents: 4,
            xattn_every: 1,
            retro_every: 1,
            image_dim: 32,
            perceiver_layers: 1,
            encoder_layers: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_latents == 0 || self.visual_tokens == 0 {
            return fail("n_latents and visual_tokens must be positive".into());
        }
        if self.xattn_every == 0 || self.retro_every == 0 {
            return fail("layer periods must be positive".into());
        }
        if self.n_layers == 0 || self.ffw_mult == 0 || self.max_len < 2 || self.neighbor_len == 0 {
            return fail("n_layers, ffw_mult, neighbor_len must be positive and max_len >= 2".into());
        }
        if self.image_dim < 2 {
            return fail("image_dim must be >= 2".into());
        }
        Ok(())
    }

    pub fn has_xattn(&self, layer: usize) -> bool {
        layer % self.xattn_every == 0
    }

    pub fn has_retro(&self, layer: usize) -> bool {
        layer % self.retro_every == 0
    }
}
