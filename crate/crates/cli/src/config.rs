//! The resolved run configuration: defaults, then a JSON config file, then
//! command-line flags.

use std::path::{Path, PathBuf};

use ragcap_core::ablation::AblationConfig;
use ragcap_core::corpus::InterleaveConfig;
use ragcap_core::model::train::TrainConfig;
use ragcap_core::model::BeamConfig;
use ragcap_core::seed::split;
use ragcap_core::{FilterPolicy, IndexConfig, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::Failure;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub embeddings: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    pub caption_embeddings: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub table: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub dup_fraction: f64,
    pub dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n: 300, dup_fraction: 0.3, dim: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed. Every subsystem seed below is derived from it.
    pub seed: u64,
    pub k: usize,
    pub index: IndexConfig,
    pub filter: FilterPolicy,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: BeamConfig,
    pub interleave: InterleaveConfig,
    pub ablation: AblationConfig,
    pub ablation_seeds: Vec<u64>,
    pub synth: SynthConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            k: ModelConfig::default().k_neighbors,
            index: IndexConfig::default(),
            filter: FilterPolicy::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            beam: BeamConfig::default(),
            interleave: InterleaveConfig::default(),
            ablation: AblationConfig::default(),
            ablation_seeds: vec![0, 1, 2],
            synth: SynthConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Sub-seed streams of the root seed.
pub mod stream {
    pub const INDEX: u64 = 1;
    pub const MODEL: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const CAPTION_EMBED: u64 = 4;
    pub const QUERY_DROPOUT: u64 = 5;
    pub const SYNTH: u64 = 6;
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::input("io_error", format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::input("invalid_config", format!("{}: {e}", path.display())))
    }

    /// Overwrites every subsystem seed with its stream of the root seed.
    pub fn derive_seeds(&mut self) {
        self.index.seed = split(self.seed, stream::INDEX);
        self.model.seed = split(self.seed, stream::MODEL);
        self.train.seed = split(self.seed, stream::TRAIN);
    }

    pub fn sub_seed(&self, stream: u64) -> u64 {
        split(self.seed, stream)
    }
}

/// Takes `flag` when given, otherwise keeps the configured value.
pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Resolves a required path from its flag or the config's `paths` section.
pub fn need_path(flag: &Option<PathBuf>, configured: &mut Option<PathBuf>, name: &str) -> Result<PathBuf, Failure> {
    if let Some(p) = flag {
        *configured = Some(p.clone());
    }
    configured.clone().ok_or_else(|| Failure::input("missing_argument", format!("--{name} is required")))
}
