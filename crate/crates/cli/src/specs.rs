//! Textual specs for queries and providers accepted on the command line.

use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use pairkb_core::providers::{
    CaptionProvider, EncoderProvider, Modality, RemoteCaptioner, RemoteConfig, RemoteEncoder,
    StubCaptioner, StubTextEncoder,
};
use pairkb_core::store::{decode_store, metadata_path, parse_metadata};
use pairkb_core::Embedding;

use crate::config::EngineConfig;

/// A query read from the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub audio: Embedding,
    pub text: Option<Embedding>,
    /// The record's audio URI, when the query came from a store with metadata.
    pub audio_ref: Option<String>,
}

/// Inline JSON floats (`[1, 0]`) or a path to a one-record PKB1 file.
pub fn parse_query(spec: &str) -> anyhow::Result<QuerySpec> {
    if spec.trim_start().starts_with('[') {
        let values: Vec<f32> = serde_json::from_str(spec).context("query is not a float array")?;
        return Ok(QuerySpec {
            audio: Embedding::unit(values)?,
            text: None,
            audio_ref: None,
        });
    }
    let path = Path::new(spec);
    let bytes = std::fs::read(path).with_context(|| format!("reading query {}", path.display()))?;
    let raw = decode_store(&bytes)?;
    if raw.records.len() != 1 {
        bail!("query file {} holds {} records, expected 1", path.display(), raw.records.len());
    }
    let meta = metadata_path(path);
    let audio_ref = if meta.exists() {
        let text = std::fs::read_to_string(&meta)?;
        parse_metadata(&text)?.into_iter().next().map(|m| m.audio_uri)
    } else {
        None
    };
    let rec = raw.records.into_iter().next().unwrap();
    Ok(QuerySpec {
        audio: Embedding::unit(rec.audio)?,
        text: Some(Embedding::unit(rec.text)?),
        audio_ref,
    })
}

/// Inline floats for a text embedding.
pub fn parse_embedding(spec: &str) -> anyhow::Result<Embedding> {
    let values: Vec<f32> = serde_json::from_str(spec).context("expected a JSON float array")?;
    Ok(Embedding::unit(values)?)
}

/// `table:<path>` or `remote:<url>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderSpec {
    Table(String),
    Remote(String),
}

impl std::str::FromStr for ProviderSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            Some(("table", p)) if !p.is_empty() => Ok(Self::Table(p.to_string())),
            Some(("remote", u)) if !u.is_empty() => Ok(Self::Remote(u.to_string())),
            _ => Err(format!("expected table:<path> or remote:<url>, got {s:?}")),
        }
    }
}

pub fn captioner(spec: &ProviderSpec, cfg: &EngineConfig) -> anyhow::Result<Arc<dyn CaptionProvider>> {
    Ok(match spec {
        ProviderSpec::Table(p) => Arc::new(StubCaptioner::from_json_file(&cfg.resolve(Path::new(p)))?),
        ProviderSpec::Remote(u) => Arc::new(RemoteCaptioner::new(u.clone(), cfg.provider_timeout())?),
    })
}

/// A text encoder producing `dim`-dimensional embeddings. A remote encoder
/// cannot report its dimension, so it needs `dim`; a table's is checked against it.
pub fn text_encoder(
    spec: &ProviderSpec,
    cfg: &EngineConfig,
    dim: Option<usize>,
) -> anyhow::Result<Arc<dyn EncoderProvider>> {
    let enc: Arc<dyn EncoderProvider> = match spec {
        ProviderSpec::Table(p) => Arc::new(StubTextEncoder::from_json_file(&cfg.resolve(Path::new(p)))?),
        ProviderSpec::Remote(u) => Arc::new(RemoteEncoder::new(RemoteConfig {
            endpoint: u.clone(),
            modality: Modality::Text,
            dim: dim.context("a remote encoder needs a known dimension")?,
            timeout: cfg.provider_timeout(),
            max_in_flight: cfg.max_in_flight,
        })?),
    };
    let Some(dim) = dim else { return Ok(enc) };
    if enc.dim() != dim {
        return Err(anyhow!(
            "text encoder produces dim {} but the knowledge base uses {dim}",
            enc.dim()
        ));
    }
    Ok(enc)
}

/// The configured remote encoder, if any, as a spec.
pub fn default_encoder(cfg: &EngineConfig) -> Option<ProviderSpec> {
    cfg.encoder_url.clone().map(ProviderSpec::Remote)
}

pub fn default_captioner(cfg: &EngineConfig) -> Option<ProviderSpec> {
    cfg.captioner_url.clone().map(ProviderSpec::Remote)
}
