//! Subcommands of the `pairkb` binary.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{builder::PossibleValuesParser, Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use pairkb_core::context::{assemble_context, build_curriculum, render_context_json, OrderPolicy};
use pairkb_core::eval::{
    noisy_self_queries, parse_queries_jsonl, similarity_stats, topk_sweep, weight_sweep, EvalQuery,
    Metric, SweepResult,
};
use pairkb_core::fixture::{gen_fixture, toy_kb, FixtureSpec};
use pairkb_core::fusion::{zero_shot_classify, CandidateText, FusionQuery};
use pairkb_core::index::{build_clustered, build_flat, load_index, save_index, Field};
use pairkb_core::refine::refine_kb;
use pairkb_core::retrieval::{generative_retrieve, RetrievalQuery, Retriever, ScoredHit, Strategy, Weight};
use pairkb_core::store::{load_embedding_store, write_store};
use pairkb_core::{Embedding, EntryId, KnowledgeBase};

use crate::config::EngineConfig;
use crate::specs::{self, ProviderSpec};

#[derive(Debug, Parser)]
#[command(name = "pairkb", version, about = "Paired audio/text knowledge-base retrieval")]
pub struct Cli {
    /// Flat TOML config file.
    #[arg(long, global = true, env = "PAIRKB_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a flat or clustered index over one field of a knowledge base.
    BuildIndex(BuildIndexArgs),
    /// Retrieve the top-k entries for one query.
    Retrieve(RetrieveArgs),
    /// Keep only the union of each trainset pair's top-k neighbours.
    Refine(RefineArgs),
    /// Score a query set at one k.
    Eval(EvalArgs),
    /// Score a query set across weights or k values; CSV or JSON out.
    Sweep(SweepArgs),
    /// Zero-shot classification by fused audio and generated-text scores.
    Classify(ClassifyArgs),
    /// Write phase 1 and phase 2 demonstration manifests for a trainset.
    Curriculum(CurriculumArgs),
    /// Write a synthetic (or the toy) knowledge base.
    GenFixture(GenFixtureArgs),
    /// Serve retrieval over HTTP.
    Serve(ServeArgs),
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn strategy_tag() -> PossibleValuesParser {
    PossibleValuesParser::new(Strategy::TAGS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IndexKindArg {
    Flat,
    Clustered,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub kb: PathBuf,
    /// audio, text or pair_concat.
    #[arg(long, default_value = "audio")]
    pub field: Field,
    #[arg(long, value_enum, default_value = "flat")]
    pub kind: IndexKindArg,
    /// Number of clusters (clustered only; defaults to sqrt(N)).
    #[arg(long, value_parser = positive)]
    pub clusters: Option<usize>,
    /// Clusters scanned per query (defaults to clusters / 4).
    #[arg(long, value_parser = positive)]
    pub probe: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output path; defaults to `<kb>.<field>.pkix`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long, value_parser = strategy_tag())]
    pub strategy: String,
    /// Inline JSON floats or a one-record PKB1 file.
    #[arg(long)]
    pub query: String,
    /// Text embedding as inline JSON floats (overrides the query file's).
    #[arg(long)]
    pub text: Option<String>,
    /// Text query to encode with `--encoder`.
    #[arg(long)]
    pub text_query: Option<String>,
    /// Audio reference handed to the captioner.
    #[arg(long)]
    pub audio_ref: Option<String>,
    #[arg(long, default_value_t = 10, value_parser = positive)]
    pub k: usize,
    #[arg(long = "W", alias = "w", value_parser = unit_interval)]
    pub w: Option<f64>,
    /// `table:<path>` or `remote:<url>`.
    #[arg(long)]
    pub captioner: Option<ProviderSpec>,
    #[arg(long)]
    pub encoder: Option<ProviderSpec>,
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<EntryId>,
    #[arg(long)]
    pub audio_index: Option<PathBuf>,
    #[arg(long)]
    pub text_index: Option<PathBuf>,
    /// Also write the interleaved demonstration context here.
    #[arg(long)]
    pub context_out: Option<PathBuf>,
    #[arg(long, default_value = "ascending")]
    pub order: OrderPolicy,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub trainset: PathBuf,
    #[arg(long, value_parser = positive)]
    pub k: usize,
    /// Skip a query's own id when the trainset is part of the knowledge base.
    #[arg(long)]
    pub exclude_self: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QuerySource {
    /// JSONL of evaluation queries.
    #[arg(long, conflicts_with = "self_queries")]
    pub queries: Option<PathBuf>,
    /// Use this many noisy copies of knowledge-base entries as queries.
    #[arg(long, value_parser = positive)]
    pub self_queries: Option<usize>,
    /// Noise magnitude for `--self-queries`.
    #[arg(long, default_value_t = 0.5)]
    pub noise: f32,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub kb: PathBuf,
    #[command(flatten)]
    pub source: QuerySource,
    #[arg(long, value_parser = strategy_tag())]
    pub strategy: String,
    #[arg(long = "W", alias = "w", value_parser = unit_interval)]
    pub w: Option<f64>,
    #[arg(long, default_value_t = 10, value_parser = positive)]
    pub k: usize,
    #[arg(long, value_delimiter = ',', default_value = "recall_at_k")]
    pub metrics: Vec<Metric>,
    /// Add pooled similarity statistics of retrieved pairs.
    #[arg(long)]
    pub similarity: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    #[value(name = "W", alias = "w")]
    W,
    K,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub kb: PathBuf,
    #[command(flatten)]
    pub source: QuerySource,
    #[arg(long, value_enum)]
    pub axis: AxisArg,
    /// Strictly increasing axis values, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// Strategy for a k sweep.
    #[arg(long, value_parser = strategy_tag(), default_value = "pair_to_pair")]
    pub strategy: String,
    #[arg(long = "W", alias = "w", value_parser = unit_interval)]
    pub w: Option<f64>,
    /// k for a weight sweep.
    #[arg(long, default_value_t = 1, value_parser = positive)]
    pub k: usize,
    #[arg(long, value_delimiter = ',', default_value = "recall_at_k")]
    pub metrics: Vec<Metric>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// JSONL of `{"id", "text", "emb"}` class prompts.
    #[arg(long)]
    pub classes: PathBuf,
    /// JSONL of `{"id", "audio", "gen_text", "label"?}`.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurriculumArgs {
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub trainset: PathBuf,
    #[arg(long, value_parser = strategy_tag(), default_value = "pair_to_pair")]
    pub strategy: String,
    #[arg(long = "W", alias = "w", value_parser = unit_interval)]
    pub w: Option<f64>,
    #[arg(long, default_value_t = pairkb_core::context::DEFAULT_TRAIN_K, value_parser = positive)]
    pub max_k: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory receiving `phase1.jsonl` and `phase2.jsonl`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenFixtureArgs {
    /// Write the three-entry toy knowledge base instead.
    #[arg(long, conflicts_with_all = ["n", "d_audio", "d_text", "correlation"])]
    pub toy: bool,
    #[arg(long, default_value_t = 1000, value_parser = positive)]
    pub n: usize,
    #[arg(long, default_value_t = 16, value_parser = positive)]
    pub d_audio: usize,
    #[arg(long, default_value_t = 16, value_parser = positive)]
    pub d_text: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.8, value_parser = unit_interval)]
    pub correlation: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub listen: String,
    /// Knowledge base served at startup.
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[arg(long)]
    pub captioner: Option<ProviderSpec>,
    #[arg(long)]
    pub encoder: Option<ProviderSpec>,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = EngineConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::BuildIndex(a) => build_index(&cfg, a, out),
        Command::Retrieve(a) => retrieve(&cfg, a, out),
        Command::Refine(a) => refine(&cfg, a, out),
        Command::Eval(a) => eval(&cfg, a, out),
        Command::Sweep(a) => sweep(&cfg, a, out),
        Command::Classify(a) => classify(a, out),
        Command::Curriculum(a) => curriculum(&cfg, a, out),
        Command::GenFixture(a) => gen(&cfg, a, out),
        Command::Serve(a) => crate::service::serve(cfg, a),
    }
}

pub fn load_kb(cfg: &EngineConfig, path: &Path) -> anyhow::Result<Arc<KnowledgeBase>> {
    let path = cfg.resolve(path);
    let kb = load_embedding_store(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Arc::new(kb))
}

pub fn retriever(cfg: &EngineConfig, kb: Arc<KnowledgeBase>) -> anyhow::Result<Retriever> {
    Ok(Retriever::new(kb)?
        .with_exact_threshold(cfg.exact_threshold)
        .with_overfetch(cfg.overfetch))
}

pub fn strategy(cfg: &EngineConfig, tag: &str, w: Option<f64>) -> anyhow::Result<Strategy> {
    let is_pair = Strategy::parse(tag, None)?.is_pair();
    let w = match (is_pair, w) {
        (true, None) => Some(cfg.default_w),
        (false, Some(_)) => bail!("--W only applies to pair strategies"),
        (_, w) => w,
    };
    Ok(Strategy::parse(tag, w)?)
}

fn emit(out: &mut dyn Write, path: Option<&Path>, bytes: &[u8]) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))?,
        None => out.write_all(bytes)?,
    }
    Ok(())
}

fn to_json_line<T: Serialize>(v: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec(v).expect("plain data serializes");
    bytes.push(b'\n');
    bytes
}

fn build_index(cfg: &EngineConfig, a: BuildIndexArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let kb = load_kb(cfg, &a.kb)?;
    let index = match a.kind {
        IndexKindArg::Flat => {
            if a.clusters.is_some() || a.probe.is_some() {
                bail!("--clusters and --probe apply to clustered indexes only");
            }
            build_flat(&kb, a.field)?
        }
        IndexKindArg::Clustered => {
            let n_clusters = a
                .clusters
                .or(cfg.n_clusters)
                .unwrap_or_else(|| ((kb.len() as f64).sqrt().round() as usize).max(1));
            let idx = build_clustered(&kb, a.field, n_clusters, a.seed.unwrap_or(cfg.seed))?;
            match a.probe.or(cfg.n_probe) {
                Some(p) => idx.with_n_probe(p)?,
                None => idx,
            }
        }
    };
    let path = a.out.unwrap_or_else(|| {
        let mut p = cfg.resolve(&a.kb).into_os_string();
        p.push(format!(".{}.pkix", a.field));
        p.into()
    });
    save_index(&index, &path)?;
    let kind = match index.kind() {
        pairkb_core::index::IndexKind::Flat => "flat".to_string(),
        pairkb_core::index::IndexKind::Clustered { n_clusters, n_probe } => {
            format!("clustered clusters={n_clusters} probe={n_probe}")
        }
    };
    writeln!(
        out,
        "N={} field={} dim={} kind={} out={}",
        index.len(),
        a.field,
        index.dim(),
        kind,
        path.display()
    )?;
    Ok(())
}

/// One hit as printed by `retrieve` and returned by the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRecord {
    pub id: EntryId,
    pub s_audio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_text: Option<f64>,
    pub s_fused: f64,
    pub caption: String,
    pub audio_uri: String,
}

pub fn hit_records(kb: &KnowledgeBase, hits: &[ScoredHit]) -> Vec<HitRecord> {
    hits.iter()
        .map(|h| {
            let e = kb.get(h.entry_id).expect("hits come from the knowledge base");
            HitRecord {
                id: h.entry_id,
                s_audio: h.s_audio,
                s_text: h.s_text,
                s_fused: h.s_fused,
                caption: e.caption.clone(),
                audio_uri: e.audio_uri.clone(),
            }
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RetrieveOutput {
    pub strategy: String,
    #[serde(rename = "W", default, skip_serializing_if = "Option::is_none")]
    pub w: Option<f64>,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_query: Option<String>,
    pub hits: Vec<HitRecord>,
}

fn retrieve(cfg: &EngineConfig, a: RetrieveArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let kb = load_kb(cfg, &a.kb)?;
    let strategy = strategy(cfg, &a.strategy, a.w)?;
    let r = match (&a.audio_index, &a.text_index) {
        (None, None) => retriever(cfg, kb.clone())?,
        (Some(ai), Some(ti)) => Retriever::with_indexes(
            kb.clone(),
            load_index(&cfg.resolve(ai))?,
            load_index(&cfg.resolve(ti))?,
        )?
        .with_exact_threshold(cfg.exact_threshold)
        .with_overfetch(cfg.overfetch),
        _ => bail!("--audio-index and --text-index go together"),
    };
    let q = specs::parse_query(&a.query)?;
    let audio_ref = a.audio_ref.clone().or(q.audio_ref.clone());
    let exclude: Option<HashSet<EntryId>> =
        (!a.exclude.is_empty()).then(|| a.exclude.iter().copied().collect());
    let d_text = kb.schema().d_text;
    let encoder = a.encoder.clone().or_else(|| specs::default_encoder(cfg));

    let (text_query, hits) = if let Strategy::GenerativePairToPair(w) = strategy {
        let audio_ref = audio_ref
            .clone()
            .context("generative retrieval needs --audio-ref or a query file with metadata")?;
        let cap_spec = a
            .captioner
            .clone()
            .or_else(|| specs::default_captioner(cfg))
            .context("generative retrieval needs --captioner")?;
        let enc_spec = encoder.context("generative retrieval needs --encoder")?;
        let captioner = specs::captioner(&cap_spec, cfg)?;
        let text_encoder = specs::text_encoder(&enc_spec, cfg, Some(d_text))?;
        let res = generative_retrieve(
            &r,
            &q.audio,
            &audio_ref,
            captioner.as_ref(),
            text_encoder.as_ref(),
            w,
            a.k,
            exclude.as_ref(),
        )?;
        (Some(res.text_query), res.hits)
    } else {
        let text = match (&a.text, &a.text_query) {
            (Some(_), Some(_)) => bail!("pass --text or --text-query, not both"),
            (Some(t), None) => Some(specs::parse_embedding(t)?),
            (None, Some(tq)) => {
                let spec = encoder.context("--text-query needs --encoder")?;
                let enc = specs::text_encoder(&spec, cfg, Some(d_text))?;
                Some(enc.encode(pairkb_core::EncodeInput::Text(tq))?)
            }
            (None, None) => q.text.clone(),
        };
        let query = RetrievalQuery {
            audio: q.audio.clone(),
            text,
            text_query: a.text_query.clone(),
            audio_ref: audio_ref.clone(),
        };
        (a.text_query.clone(), r.retrieve(strategy, &query, a.k, exclude.as_ref())?)
    };

    if let Some(path) = &a.context_out {
        let ctx = assemble_context(
            &hits,
            &kb,
            audio_ref.as_deref().unwrap_or("query"),
            a.k,
            a.order,
        )?;
        fs::write(path, render_context_json(&ctx))?;
    }
    let output = RetrieveOutput {
        strategy: strategy.tag().to_string(),
        w: strategy.weight().map(Weight::value),
        k: a.k,
        text_query,
        hits: hit_records(&kb, &hits),
    };
    emit(out, a.out.as_deref(), &to_json_line(&output))
}

fn refine(cfg: &EngineConfig, a: RefineArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let kb = load_kb(cfg, &a.kb)?;
    let trainset = load_kb(cfg, &a.trainset)?;
    let (refined, report) = refine_kb(&kb, &trainset, a.k, a.exclude_self)?;
    write_store(&refined, &a.out)?;
    log::info!("refined {} -> {} entries", kb.len(), refined.len());
    emit(out, a.report.as_deref(), &to_json_line(&report))
}

fn load_queries(
    cfg: &EngineConfig,
    kb: &KnowledgeBase,
    src: &QuerySource,
) -> anyhow::Result<(Vec<EvalQuery>, Option<u64>)> {
    match (&src.queries, src.self_queries) {
        (Some(p), None) => {
            let p = cfg.resolve(p);
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            Ok((parse_queries_jsonl(&text)?, None))
        }
        (None, Some(n)) => {
            let seed = src.seed.unwrap_or(cfg.seed);
            Ok((noisy_self_queries(kb, n, src.noise, seed)?, Some(seed)))
        }
        _ => bail!("pass --queries or --self-queries"),
    }
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    strategy: String,
    #[serde(rename = "W", skip_serializing_if = "Option::is_none")]
    w: Option<f64>,
    kb: String,
    k: usize,
    n_queries: usize,
    metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    similarity: Option<pairkb_core::eval::SimilarityStats>,
}

fn eval(cfg: &EngineConfig, a: EvalArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let kb = load_kb(cfg, &a.kb)?;
    let (queries, _) = load_queries(cfg, &kb, &a.source)?;
    let strategy = strategy(cfg, &a.strategy, a.w)?;
    let r = retriever(cfg, kb.clone())?;
    let point = topk_sweep(&queries, &r, &[a.k], strategy, &a.metrics)?
        .points
        .pop()
        .expect("one point per k");
    let similarity = a
        .similarity
        .then(|| similarity_stats(&queries, &r, strategy, a.k))
        .transpose()?;
    let output = EvalOutput {
        strategy: strategy.tag().into(),
        w: strategy.weight().map(Weight::value),
        kb: kb.name().into(),
        k: a.k,
        n_queries: queries.len(),
        metrics: point.metrics,
        similarity,
    };
    emit(out, a.out.as_deref(), &to_json_line(&output))
}

fn sweep(cfg: &EngineConfig, a: SweepArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let kb = load_kb(cfg, &a.kb)?;
    let (queries, seed) = load_queries(cfg, &kb, &a.source)?;
    let r = retriever(cfg, kb)?;
    let mut result: SweepResult = match a.axis {
        AxisArg::W => {
            if a.w.is_some() {
                bail!("--W is the swept axis; pass weights with --values");
            }
            weight_sweep(&queries, &r, &a.values, a.k, &a.metrics)?
        }
        AxisArg::K => {
            let ks = a
                .values
                .iter()
                .map(|&v| {
                    if v >= 1.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        bail!("k values must be positive integers, got {v}")
                    }
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            topk_sweep(&queries, &r, &ks, strategy(cfg, &a.strategy, a.w)?, &a.metrics)?
        }
    };
    result.seed = seed;
    let bytes = match a.format {
        Format::Csv => result.to_csv().into_bytes(),
        Format::Json => {
            let mut s = result.to_json();
            s.push('\n');
            s.into_bytes()
        }
    };
    emit(out, a.out.as_deref(), &bytes)
}

#[derive(Debug, Deserialize)]
struct ClassifyQuery {
    id: u64,
    audio: Embedding,
    gen_text: Embedding,
    #[serde(default)]
    label: Option<u64>,
}

#[derive(Debug, Serialize)]
struct Prediction {
    query_id: u64,
    class_id: u64,
    score: f64,
}

#[derive(Debug, Serialize)]
struct ClassifyOutput {
    predictions: Vec<Prediction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    accuracy: Option<f64>,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1))
        })
        .collect()
}

fn classify(a: ClassifyArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    #[derive(Deserialize)]
    struct ClassLine {
        id: u64,
        text: String,
        emb: Embedding,
    }
    let classes = read_jsonl::<ClassLine>(&a.classes)?
        .into_iter()
        .map(|c| CandidateText::new(c.id, c.text, c.emb))
        .collect::<pairkb_core::Result<Vec<_>>>()?;
    let queries: Vec<ClassifyQuery> = read_jsonl(&a.queries)?;
    let mut predictions = Vec::with_capacity(queries.len());
    let mut preds = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for q in &queries {
        let fq = FusionQuery {
            audio: q.audio.clone(),
            gen_text: q.gen_text.clone(),
        };
        let (class_id, score) = zero_shot_classify(&fq, &classes)?;
        predictions.push(Prediction {
            query_id: q.id,
            class_id,
            score,
        });
        preds.insert(q.id, class_id);
        if let Some(l) = q.label {
            truth.insert(q.id, l);
        }
    }
    let accuracy = if truth.is_empty() {
        None
    } else {
        Some(pairkb_core::zero_shot_accuracy(&preds, &truth)?)
    };
    emit(out, a.out.as_deref(), &to_json_line(&ClassifyOutput { predictions, accuracy }))
}

fn curriculum(cfg: &EngineConfig, a: CurriculumArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let kb = load_kb(cfg, &a.kb)?;
    let trainset = load_kb(cfg, &a.trainset)?;
    let r = retriever(cfg, kb)?;
    let strategy = strategy(cfg, &a.strategy, a.w)?;
    let (p1, p2) = build_curriculum(&trainset, &r, strategy, a.max_k, a.seed.unwrap_or(cfg.seed))?;
    fs::create_dir_all(&a.out_dir)?;
    for (m, name) in [(&p1, "phase1.jsonl"), (&p2, "phase2.jsonl")] {
        let path = a.out_dir.join(name);
        m.write_jsonl(fs::File::create(&path)?)?;
        writeln!(out, "phase={} samples={} out={}", m.phase, m.samples.len(), path.display())?;
    }
    Ok(())
}

fn gen(cfg: &EngineConfig, a: GenFixtureArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let kb = if a.toy {
        toy_kb()
    } else {
        gen_fixture(&FixtureSpec {
            n: a.n,
            d_audio: a.d_audio,
            d_text: a.d_text,
            seed: a.seed.unwrap_or(cfg.seed),
            correlation: a.correlation as f32,
        })?
    };
    write_store(&kb, &a.out)?;
    writeln!(
        out,
        "N={} d_audio={} d_text={} out={}",
        kb.len(),
        kb.schema().d_audio,
        kb.schema().d_text,
        a.out.display()
    )?;
    Ok(())
}
