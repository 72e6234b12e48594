use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ragcap_core::ablation::{render_table, run_ablation, AblationRun};
use ragcap_core::corpus::synthetic::duplicate_caption_corpus;
use ragcap_core::corpus::{
    build_interleaved, duplicate_caption_ratio, ingest_manifest, read_embeddings_bin, write_interleaved, write_manifest,
    CaptionEmbeddings,
};
use ragcap_core::fsutil::write_atomic_with;
use ragcap_core::metrics::{evaluate, EvalPair};
use ragcap_core::model::beam::generate_caption_tokens;
use ragcap_core::model::tokenizer::{detokenize, detokenize_bytes, tokenize};
use ragcap_core::model::train::{train, RetrievalMode, TrainingPair};
use ragcap_core::model::{load_checkpoint, save_checkpoint, Checkpoint, FreezePolicy};
use ragcap_core::retriever::{apply_query_dropout, retrieve_filtered};
use ragcap_core::{normalize, Corpus, EmbeddingVector, FilterPolicy, Index, IndexMode, ModelParams, RetrievalQuery};
use serde::Serialize;
use serde_json::json;

use crate::args::*;
use crate::config::{need_path, set, stream, RunConfig};
use crate::error::Failure;
use crate::output::{emit, io_failure, write_json, write_sidecar};

/// Width used for synthetic caption vectors in interleave construction.
const CAPTION_EMBED_DIM: usize = 64;

pub fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    set(&mut cfg.seed, cli.seed);
    cfg.derive_seeds();
    match cli.command {
        Command::IndexBuild(a) => index_build(a, cfg),
        Command::Retrieve(a) => retrieve(a, cfg),
        Command::InterleaveBuild(a) => interleave_build(a, cfg),
        Command::DedupReport(a) => dedup_report(a, cfg),
        Command::Train(a) => train_cmd(a, cfg),
        Command::Caption(a) => caption(a, cfg),
        Command::Eval(a) => eval(a, cfg),
        Command::Ablate(a) => ablate(a, cfg),
        Command::SynthCorpus(a) => synth_corpus(a, cfg),
    }
}

fn load_corpus(a: &CorpusArgs, cfg: &mut RunConfig) -> Result<Corpus, Failure> {
    let emb = need_path(&a.embeddings, &mut cfg.paths.embeddings, "embeddings")?;
    let meta = need_path(&a.metadata, &mut cfg.paths.metadata, "metadata")?;
    Ok(ingest_manifest(&emb, &meta)?)
}

/// Parses `--query-embedding`: a path to a JSON array of numbers, or hex of
/// little-endian f32 values.
pub fn parse_query_embedding(arg: &str) -> Result<Vec<f32>, Failure> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::input("io_error", format!("{arg}: {e}")))?;
        return serde_json::from_str(&text)
            .map_err(|e| Failure::input("invalid_input", format!("{arg}: expected a JSON array of numbers: {e}")));
    }
    let hex = arg.trim();
    if hex.is_empty() || hex.len() % 8 != 0 || !hex.is_ascii() {
        return Err(Failure::input(
            "invalid_input",
            "query embedding is neither a readable file nor hex of little-endian f32 values",
        ));
    }
    let bytes = (0..hex.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&hex[i..i + 2], 16))
        .collect::<Result<Vec<u8>, _>>()
        .map_err(|e| Failure::input("invalid_input", format!("bad hex in query embedding: {e}")))?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn query_vector(arg: &str, dim: usize) -> Result<EmbeddingVector, Failure> {
    let raw = parse_query_embedding(arg)?;
    if raw.len() != dim {
        return Err(Failure::input("invalid_input", format!("query embedding has dim {}, expected {dim}", raw.len())));
    }
    normalize(&raw).map_err(|e| Failure::input("invalid_input", e))
}

fn index_build(a: IndexBuildArgs, mut cfg: RunConfig) -> Result<(), Failure> {
    let corpus = load_corpus(&a.corpus, &mut cfg)?;
    let out = need_path(&a.out, &mut cfg.paths.out, "out")?;
    if let Some(m) = a.mode {
        cfg.index.mode = match m {
            ModeArg::Exact => IndexMode::Exact,
            ModeArg::Ivf => IndexMode::Ivf,
        };
    }
    set(&mut cfg.index.nlist, a.nlist);
    set(&mut cfg.index.nprobe, a.nprobe);
    cfg.index.dim = corpus.dim;
    let count = corpus.len();
    let index = Index::build(corpus.records, cfg.index.clone())?;
    index.save(&out)?;
    write_sidecar(&out, "index-build", &cfg)?;
    emit(json!({"count": count, "dim": index.dim()}), &cfg)
}

fn retrieve(a: RetrieveArgs, mut cfg: RunConfig) -> Result<(), Failure> {
    let index_path = need_path(&a.index, &mut cfg.paths.index, "index")?;
    let index = Index::load(&index_path)?;
    set(&mut cfg.k, a.k);
    if a.no_filter || a.query_dropout.is_some() {
        cfg.filter = FilterPolicy::none();
    }
    let mut query = RetrievalQuery::new(query_vector(&a.query_embedding, index.dim())?);
    if let Some(id) = a.gt_id {
        query = query.with_image_id(id);
    }
    if let Some(c) = &a.gt_caption {
        query = query.with_ground_truth(c.clone());
    }
    let mut result = retrieve_filtered(&index, &query, cfg.k, &cfg.filter)?;
    if let Some(p) = a.query_dropout {
        let toks: Vec<Vec<u32>> = result.captions().map(tokenize).collect();
        let dropped = apply_query_dropout(&result, &toks, p, cfg.sub_seed(stream::QUERY_DROPOUT))?;
        for (n, t) in result.neighbors.iter_mut().zip(dropped) {
            let bytes = detokenize_bytes(&t)?;
            n.caption = String::from_utf8_lossy(&bytes).into_owned();
        }
    }
    emit(&result, &cfg)
}

fn interleave_build(a: InterleaveArgs, mut cfg: RunConfig) -> Result<(), Failure> {
    let corpus = load_corpus(&a.corpus, &mut cfg)?;
    let out = need_path(&a.out, &mut cfg.paths.out, "out")?;
    set(&mut cfg.interleave.band_low, a.band_low);
    set(&mut cfg.interleave.band_high, a.band_high);
    set(&mut cfg.interleave.shots, a.shots);
    if let Some(p) = &a.caption_embeddings {
        cfg.paths.caption_embeddings = Some(p.clone());
    }
    let supplied: Option<Vec<EmbeddingVector>> = match &cfg.paths.caption_embeddings {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Failure::input("io_error", format!("{}: {e}", p.display())))?;
            let (_, rows) = read_embeddings_bin(&bytes)?;
            let vecs = rows
                .iter()
                .enumerate()
                .map(|(i, r)| normalize(r).map_err(|e| Failure::input("invalid_input", format!("caption row {i}: {e}"))))
                .collect::<Result<_, _>>()?;
            Some(vecs)
        }
        None => None,
    };
    let source = match (&supplied, a.no_synthetic_captions) {
        (Some(v), _) => CaptionEmbeddings::Supplied(v),
        (None, true) => CaptionEmbeddings::Disabled,
        (None, false) => CaptionEmbeddings::Synthetic { dim: CAPTION_EMBED_DIM, seed: cfg.sub_seed(stream::CAPTION_EMBED) },
    };
    let built = build_interleaved(&corpus, &cfg.interleave, source)?;
    write_interleaved(&out, &built.samples).map_err(|e| io_failure(&out, e))?;
    write_sidecar(&out, "interleave-build", &cfg)?;
    emit(json!({"samples": built.samples.len(), "skipped": built.skipped}), &cfg)
}

fn dedup_report(a: CorpusArgs, mut cfg: RunConfig) -> Result<(), Failure> {
    let corpus = load_corpus(&a, &mut cfg)?;
    let report = duplicate_caption_ratio(&corpus)?;
    emit(&report, &cfg)
}

fn retrieval_mode(arg: Option<RetrievalArg>, n: usize) -> Option<RetrievalMode> {
    arg.map(|r| match r {
        RetrievalArg::None => RetrievalMode::None,
        RetrievalArg::CrossAttention => RetrievalMode::CrossAttention,
        RetrievalArg::Prepend => RetrievalMode::Prepend { n },
    })
}

fn open_index(path: &Path, dim: usize) -> Result<Index, Failure> {
    let index = Index::load(path)?;
    if index.dim() != dim {
        return Err(Failure::input("invalid_input", format!("index dim {} does not match embeddings dim {dim}", index.dim())));
    }
    Ok(index)
}

fn train_cmd(a: TrainArgs, mut cfg: RunConfig) -> Result<(), Failure> {
    let corpus = load_corpus(&a.corpus, &mut cfg)?;
    let out = need_path(&a.out, &mut cfg.paths.out, "out")?;
    if let Some(p) = &a.log {
        cfg.paths.log = Some(p.clone());
    }
    if let Some(p) = &a.index {
        cfg.paths.index = Some(p.clone());
    }
    set(&mut cfg.train.retrieval, retrieval_mode(a.retrieval, a.prepend_n));
    set(&mut cfg.train.steps, a.steps);
    set(&mut cfg.train.lr, a.lr);
    set(&mut cfg.train.batch_size, a.batch_size);
    set(&mut cfg.train.query_dropout, a.query_dropout);
    if let Some(p) = a.policy {
        cfg.train.policy = match p {
            PolicyArg::Pretrain => FreezePolicy::Pretrain,
            PolicyArg::Finetune => FreezePolicy::Finetune,
        };
    }
    if a.no_filter {
        cfg.train.filter = FilterPolicy::none();
    }
    cfg.model.image_dim = corpus.dim;
    cfg.index.dim = corpus.dim;

    let index = match (cfg.train.retrieval, &cfg.paths.index) {
        (RetrievalMode::None, _) => None,
        (_, Some(p)) => Some(open_index(p, corpus.dim)?),
        (_, None) => Some(Index::build(corpus.records.clone(), cfg.index.clone())?),
    };
    let pairs: Vec<TrainingPair> = corpus
        .records
        .iter()
        .map(|r| TrainingPair { id: r.id, image: r.embedding.clone(), caption: r.caption.clone() })
        .collect();
    let mut params = ModelParams::init(&cfg.model)?;
    let mut log = Vec::new();
    let outcome = train(&mut params, &pairs, index.as_ref(), &cfg.train, &mut |r| {
        log::debug!("step {} loss {:.6}", r.step, r.loss);
        log.push(*r);
    })?;

    let ckpt = Checkpoint { params, step: outcome.steps, rng_seed: cfg.train.seed, rng_word_pos: outcome.rng_word_pos };
    save_checkpoint(&out, &ckpt)?;
    write_sidecar(&out, "train", &cfg)?;
    if let Some(p) = cfg.paths.log.clone() {
        write_atomic_with(&p, |w| {
            for r in &log {
                serde_json::to_writer(&mut *w, r)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        })
        .map_err(|e| io_failure(&p, e))?;
        write_sidecar(&p, "train", &cfg)?;
    }
    emit(json!({"steps": outcome.steps, "final_loss": outcome.losses.last()}), &cfg)
}

fn caption(a: CaptionArgs, mut cfg: RunConfig) -> Result<(), Failure> {
    let ckpt_path = need_path(&a.checkpoint, &mut cfg.paths.checkpoint, "checkpoint")?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let params = ckpt.params;
    cfg.model = params.config.clone();
    set(&mut cfg.beam.beam, a.beam);
    set(&mut cfg.beam.max_len, a.max_len);
    if let Some(p) = &a.index {
        cfg.paths.index = Some(p.clone());
    }
    let default_mode = if cfg.paths.index.is_some() { RetrievalMode::CrossAttention } else { RetrievalMode::None };
    let mode = retrieval_mode(a.retrieval, a.prepend_n).unwrap_or(default_mode);
    cfg.train.retrieval = mode;

    let image = query_vector(&a.query_embedding, params.config.image_dim)?;
    let retrieved = match (mode, &cfg.paths.index) {
        (RetrievalMode::None, _) => None,
        (_, None) => return Err(Failure::input("missing_argument", "retrieval needs --index")),
        (mode, Some(p)) => {
            let index = open_index(p, params.config.image_dim)?;
            let k = match mode {
                RetrievalMode::Prepend { n } => n.max(1),
                _ => params.config.k_neighbors,
            };
            let mut q = RetrievalQuery::new(image.clone());
            if let Some(id) = a.gt_id {
                q = q.with_image_id(id);
            }
            Some(retrieve_filtered(&index, &q, k, &FilterPolicy::image_only())?)
        }
    };
    let tokens = generate_caption_tokens(&params, Some(&image), retrieved.as_ref(), mode, &cfg.beam)?;
    emit(json!({"caption": detokenize(&tokens)?, "n_tokens": tokens.len()}), &cfg)
}

fn eval(a: EvalArgs, mut cfg: RunConfig) -> Result<(), Failure> {
    let path = need_path(&a.pairs, &mut cfg.paths.pairs, "pairs")?;
    let file = std::fs::File::open(&path).map_err(|e| Failure::input("io_error", format!("{}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_failure(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: EvalPair = serde_json::from_str(&line)
            .map_err(|e| Failure::input("invalid_input", format!("{} line {}: {e}", path.display(), i + 1)))?;
        pairs.push(p);
    }
    emit(evaluate(&pairs)?, &cfg)
}

#[derive(Serialize)]
struct AblationOutput<'a> {
    runs: &'a [AblationRun],
    table: &'a str,
}

fn ablate(a: AblateArgs, mut cfg: RunConfig) -> Result<(), Failure> {
    set(&mut cfg.ablation_seeds, a.seeds);
    set(&mut cfg.ablation.steps, a.steps);
    set(&mut cfg.synth.n, a.synth_n);
    if let Some(p) = &a.out {
        cfg.paths.out = Some(p.clone());
    }
    if let Some(p) = &a.table {
        cfg.paths.table = Some(p.clone());
    }
    let corpus = if a.corpus.embeddings.is_some() || cfg.paths.embeddings.is_some() {
        load_corpus(&a.corpus, &mut cfg)?
    } else {
        duplicate_caption_corpus(cfg.synth.n, cfg.synth.dup_fraction, cfg.synth.dim, cfg.sub_seed(stream::SYNTH))
    };
    if cfg.ablation_seeds.is_empty() {
        return Err(Failure::input("invalid_input", "no ablation seeds"));
    }
    let runs = cfg
        .ablation_seeds
        .iter()
        .map(|s| run_ablation(&corpus, &cfg.ablation, *s))
        .collect::<Result<Vec<_>, _>>()?;
    let table = render_table(&runs);
    if let Some(p) = &cfg.paths.out {
        write_json(p, AblationOutput { runs: &runs, table: &table }, &cfg)?;
    }
    if let Some(p) = cfg.paths.table.clone() {
        write_atomic_with(&p, |w| w.write_all(table.as_bytes())).map_err(|e| io_failure(&p, e))?;
        write_sidecar(&p, "ablate", &cfg)?;
    }
    print!("{table}");
    Ok(())
}

fn synth_corpus(a: SynthArgs, mut cfg: RunConfig) -> Result<(), Failure> {
    set(&mut cfg.synth.n, a.n);
    set(&mut cfg.synth.dup_fraction, a.dup_fraction);
    set(&mut cfg.synth.dim, a.dim);
    if cfg.synth.n == 0 || cfg.synth.dim < 2 || !(0.0..=1.0).contains(&cfg.synth.dup_fraction) {
        return Err(Failure::input("invalid_input", "need n >= 1, dim >= 2 and dup_fraction in [0, 1]"));
    }
    cfg.paths.embeddings = Some(a.out_embeddings.clone());
    cfg.paths.metadata = Some(a.out_metadata.clone());
    let corpus = duplicate_caption_corpus(cfg.synth.n, cfg.synth.dup_fraction, cfg.synth.dim, cfg.sub_seed(stream::SYNTH));
    write_manifest(&corpus, &a.out_embeddings, &a.out_metadata).map_err(|e| io_failure(&a.out_embeddings, e))?;
    for p in [&a.out_embeddings, &a.out_metadata] {
        write_sidecar(p, "synth-corpus", &cfg)?;
    }
    emit(json!({"count": corpus.len(), "dim": corpus.dim}), &cfg)
}
