use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "ragcap", version, about = "Retrieval-augmented image captioning toolkit")]
pub struct Cli {
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; every subsystem seed is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build and save a vector index from embeddings.bin + metadata.jsonl.
    IndexBuild(IndexBuildArgs),
    /// Filtered k-NN lookup for one query embedding.
    Retrieve(RetrieveArgs),
    /// Build interleaved few-shot samples as JSONL.
    InterleaveBuild(InterleaveArgs),
    /// Report the share of records with a duplicated caption.
    DedupReport(CorpusArgs),
    /// Train a captioner and save a checkpoint.
    Train(TrainArgs),
    /// Caption one image embedding with beam search.
    Caption(CaptionArgs),
    /// Corpus BLEU@4 and CIDEr-D of candidate/reference pairs.
    Eval(EvalArgs),
    /// Filtering and prefix-vs-cross-attention ablations.
    Ablate(AblateArgs),
    /// Write a synthetic corpus with a share of duplicated captions.
    SynthCorpus(SynthArgs),
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub metadata: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Exact,
    Ivf,
}

#[derive(Debug, Args)]
pub struct IndexBuildArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub nlist: Option<usize>,
    #[arg(long)]
    pub nprobe: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Hex-encoded little-endian f32 values, or a file holding a JSON array.
    #[arg(long)]
    pub query_embedding: String,
    #[arg(long)]
    pub gt_caption: Option<String>,
    #[arg(long)]
    pub gt_id: Option<u64>,
    #[arg(short = 'k', long)]
    pub k: Option<usize>,
    /// Plain k-NN, no filtering.
    #[arg(long, conflicts_with = "query_dropout")]
    pub no_filter: bool,
    /// Query-dropout baseline with this maximum drop probability. Implies no
    /// filtering.
    #[arg(long)]
    pub query_dropout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InterleaveArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// embeddings.bin with one caption vector per record.
    #[arg(long, conflicts_with = "no_synthetic_captions")]
    pub caption_embeddings: Option<PathBuf>,
    /// Fail instead of synthesizing caption vectors when none are supplied.
    #[arg(long)]
    pub no_synthetic_captions: bool,
    #[arg(long)]
    pub band_low: Option<f64>,
    #[arg(long)]
    pub band_high: Option<f64>,
    #[arg(long)]
    pub shots: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RetrievalArg {
    None,
    CrossAttention,
    Prepend,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    Pretrain,
    Finetune,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Checkpoint output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Retrieval index; built exactly from the corpus when absent.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Per-step JSONL training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub retrieval: Option<RetrievalArg>,
    /// Captions written into the sequence in prepend mode.
    #[arg(long, default_value_t = 2)]
    pub prepend_n: usize,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub policy: Option<PolicyArg>,
    #[arg(long)]
    pub no_filter: bool,
    #[arg(long)]
    pub query_dropout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Hex-encoded little-endian f32 values, or a file holding a JSON array.
    #[arg(long)]
    pub query_embedding: String,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Defaults to cross-attention when an index is given.
    #[arg(long, value_enum)]
    pub retrieval: Option<RetrievalArg>,
    #[arg(long, default_value_t = 2)]
    pub prepend_n: usize,
    /// Id of the query image, dropped from the neighbors.
    #[arg(long)]
    pub gt_id: Option<u64>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSONL of {"candidate": str, "references": [str]}.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Corpus; the synthetic duplicate-caption corpus is used when absent.
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// JSON table output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Aligned text table output.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Comma-separated ablation seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub synth_n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_embeddings: PathBuf,
    #[arg(long)]
    pub out_metadata: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub dup_fraction: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
}
