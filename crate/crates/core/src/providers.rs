//! Sources of embeddings and generated captions.
//!
//! The engine never runs models. Embeddings come from precomputed stores,
//! lookup tables (for tests and small demos) or a remote encoder reached
//! over JSON/HTTP:
//!
//! ```text
//! POST <endpoint>  {"modality": "audio"|"text", "text"?: str, "audio_uri"?: str}
//!             ->   {"values": [float], "dim": int}
//! ```
//!
//! A remote captioner uses `{"audio_uri": str} -> {"caption": str}`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::embedding::{l2_normalize, Embedding};
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;

/// Default endpoint for remote encoders.
pub const ENCODER_URL_ENV: &str = "PAIRKB_ENCODER_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Text,
}

impl Modality {
    fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    FileBacked,
    Stub,
    Remote,
}

/// What to encode: a caption or a locator for an audio clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeInput<'a> {
    Text(&'a str),
    AudioUri(&'a str),
}

impl EncodeInput<'_> {
    fn modality(&self) -> Modality {
        match self {
            EncodeInput::Text(_) => Modality::Text,
            EncodeInput::AudioUri(_) => Modality::Audio,
        }
    }
}

/// An encoder for one modality. Every successful call returns a unit vector of `dim()`.
pub trait EncoderProvider: Send + Sync {
    fn kind(&self) -> ProviderKind;
    fn modality(&self) -> Modality;
    fn dim(&self) -> usize;
    fn encode(&self, input: EncodeInput<'_>) -> Result<Embedding>;
}

/// Turns an audio reference into a caption (the generative text query).
pub trait CaptionProvider: Send + Sync {
    fn caption(&self, audio_ref: &str) -> Result<String>;
}

fn check_modality(expected: Modality, input: &EncodeInput<'_>) -> Result<()> {
    if input.modality() == expected {
        Ok(())
    } else {
        Err(Error::UnsupportedModality(input.modality().as_str()))
    }
}

/// Looks `caption` up in `table` and returns its normalized vector.
pub fn stub_text_encode(caption: &str, table: &HashMap<String, Embedding>) -> Result<Embedding> {
    let v = table
        .get(caption)
        .ok_or_else(|| Error::UnknownCaption(caption.to_string()))?;
    l2_normalize(v)
}

pub fn stub_caption(audio_ref: &str, table: &HashMap<String, String>) -> Result<String> {
    table
        .get(audio_ref)
        .cloned()
        .ok_or_else(|| Error::UnknownAudioRef(audio_ref.to_string()))
}

/// Table-driven text encoder.
#[derive(Debug, Clone)]
pub struct StubTextEncoder {
    table: HashMap<String, Embedding>,
    dim: usize,
}

impl StubTextEncoder {
    pub fn new(table: HashMap<String, Embedding>) -> Result<Self> {
        let dim = table
            .values()
            .next()
            .map(Embedding::dim)
            .ok_or_else(|| Error::InvalidArgument("empty encoder table".into()))?;
        for v in table.values() {
            v.ensure_dim(dim)?;
        }
        Ok(Self { table, dim })
    }

    /// Reads a JSON object mapping caption → float array.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let table: HashMap<String, Embedding> = serde_json::from_str(&fs::read_to_string(path)?)?;
        Self::new(table)
    }
}

impl EncoderProvider for StubTextEncoder {
    fn kind(&self) -> ProviderKind {
        ProviderKind::Stub
    }
    fn modality(&self) -> Modality {
        Modality::Text
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn encode(&self, input: EncodeInput<'_>) -> Result<Embedding> {
        check_modality(Modality::Text, &input)?;
        let EncodeInput::Text(caption) = input else {
            unreachable!()
        };
        stub_text_encode(caption, &self.table)
    }
}

/// Table-driven captioner.
#[derive(Debug, Clone, Default)]
pub struct StubCaptioner {
    table: HashMap<String, String>,
}

impl StubCaptioner {
    pub fn new(table: HashMap<String, String>) -> Self {
        Self { table }
    }

    /// Reads a JSON object mapping audio reference → caption.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(Self::new(serde_json::from_str(&fs::read_to_string(path)?)?))
    }
}

impl CaptionProvider for StubCaptioner {
    fn caption(&self, audio_ref: &str) -> Result<String> {
        stub_caption(audio_ref, &self.table)
    }
}

/// Serves precomputed embeddings out of a loaded knowledge base:
/// audio by `audio_uri`, text by exact caption.
#[derive(Debug, Clone)]
pub struct FileBackedEncoder {
    kb: Arc<KnowledgeBase>,
    modality: Modality,
    captions: HashMap<String, usize>,
}

impl FileBackedEncoder {
    pub fn new(kb: Arc<KnowledgeBase>, modality: Modality) -> Self {
        let captions = kb
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| (e.caption.clone(), i))
            .collect();
        Self {
            kb,
            modality,
            captions,
        }
    }
}

impl EncoderProvider for FileBackedEncoder {
    fn kind(&self) -> ProviderKind {
        ProviderKind::FileBacked
    }
    fn modality(&self) -> Modality {
        self.modality
    }
    fn dim(&self) -> usize {
        match self.modality {
            Modality::Audio => self.kb.schema().d_audio,
            Modality::Text => self.kb.schema().d_text,
        }
    }
    fn encode(&self, input: EncodeInput<'_>) -> Result<Embedding> {
        check_modality(self.modality, &input)?;
        match input {
            EncodeInput::AudioUri(uri) => self
                .kb
                .find_by_audio_uri(uri)
                .map(|e| e.audio.clone())
                .ok_or_else(|| Error::UnknownAudioRef(uri.to_string())),
            EncodeInput::Text(caption) => self
                .captions
                .get(caption)
                .map(|&i| self.kb.entries()[i].text.clone())
                .ok_or_else(|| Error::UnknownCaption(caption.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEncodeRequest {
    pub modality: Modality,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub audio_uri: Option<String>,
}

impl RemoteEncodeRequest {
    pub fn from_input(input: EncodeInput<'_>) -> Self {
        match input {
            EncodeInput::Text(t) => Self {
                modality: Modality::Text,
                text: Some(t.to_string()),
                audio_uri: None,
            },
            EncodeInput::AudioUri(u) => Self {
                modality: Modality::Audio,
                text: None,
                audio_uri: Some(u.to_string()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEncodeResponse {
    pub values: Vec<f64>,
    pub dim: usize,
}

/// Validates a response body against the configured dimension and normalizes it.
pub fn parse_encode_response(body: &[u8], expected_dim: usize) -> Result<Embedding> {
    let resp: RemoteEncodeResponse =
        serde_json::from_slice(body).map_err(|e| Error::MalformedResponse(e.to_string()))?;
    if resp.dim != resp.values.len() {
        return Err(Error::MalformedResponse(format!(
            "dim field {} but {} values",
            resp.dim,
            resp.values.len()
        )));
    }
    if resp.dim != expected_dim {
        return Err(Error::DimMismatch {
            expected: expected_dim,
            got: resp.dim,
        });
    }
    let values: Vec<f32> = resp.values.iter().map(|&v| v as f32).collect();
    let emb = Embedding::new(values).map_err(|e| match e {
        Error::NonFinite => Error::NonFiniteResponse,
        other => other,
    })?;
    l2_normalize(&emb).map_err(|e| match e {
        Error::NonFinite => Error::NonFiniteResponse,
        other => other,
    })
}

fn map_transport(err: reqwest::Error) -> Error {
    if err.is_timeout() {
        Error::Timeout
    } else {
        Error::Transport(err.to_string())
    }
}

fn http_client(timeout: Duration) -> Result<reqwest::blocking::Client> {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(map_transport)
}

fn post_json(
    client: &reqwest::blocking::Client,
    endpoint: &str,
    body: &impl Serialize,
) -> Result<Vec<u8>> {
    let resp = client.post(endpoint).json(body).send().map_err(map_transport)?;
    let status = resp.status();
    let bytes = resp.bytes().map_err(map_transport)?;
    if !status.is_success() {
        return Err(Error::Transport(format!("HTTP {status}")));
    }
    Ok(bytes.to_vec())
}

/// One-shot remote encode with a fresh client.
pub fn remote_encode(
    req: &RemoteEncodeRequest,
    endpoint: &str,
    timeout: Duration,
    expected_dim: usize,
) -> Result<Embedding> {
    let client = http_client(timeout)?;
    let body = post_json(&client, endpoint, req)?;
    parse_encode_response(&body, expected_dim)
}

/// Counting semaphore bounding in-flight remote calls.
#[derive(Debug)]
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock();
        while *free == 0 {
            self.cv.wait(&mut free);
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock() += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub modality: Modality,
    pub dim: usize,
    pub timeout: Duration,
    pub max_in_flight: usize,
}

impl RemoteConfig {
    /// Uses `PAIRKB_ENCODER_URL` as the endpoint.
    pub fn from_env(modality: Modality, dim: usize) -> Result<Self> {
        let endpoint = std::env::var(ENCODER_URL_ENV)
            .map_err(|_| Error::InvalidArgument(format!("{ENCODER_URL_ENV} is not set")))?;
        Ok(Self {
            endpoint,
            modality,
            dim,
            timeout: Duration::from_secs(30),
            max_in_flight: 8,
        })
    }
}

/// HTTP encoder client. Safe to share; concurrent calls beyond
/// `max_in_flight` block until a slot frees up.
#[derive(Debug)]
pub struct RemoteEncoder {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
    permits: Permits,
}

impl RemoteEncoder {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        Ok(Self {
            client: http_client(config.timeout)?,
            permits: Permits::new(config.max_in_flight),
            config,
        })
    }
}

impl EncoderProvider for RemoteEncoder {
    fn kind(&self) -> ProviderKind {
        ProviderKind::Remote
    }
    fn modality(&self) -> Modality {
        self.config.modality
    }
    fn dim(&self) -> usize {
        self.config.dim
    }
    fn encode(&self, input: EncodeInput<'_>) -> Result<Embedding> {
        check_modality(self.config.modality, &input)?;
        let _permit = self.permits.acquire();
        let body = post_json(
            &self.client,
            &self.config.endpoint,
            &RemoteEncodeRequest::from_input(input),
        )?;
        parse_encode_response(&body, self.config.dim)
    }
}

/// HTTP captioner client.
#[derive(Debug)]
pub struct RemoteCaptioner {
    endpoint: String,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct CaptionRequest<'a> {
    audio_uri: &'a str,
}

#[derive(Deserialize)]
struct CaptionResponse {
    caption: String,
}

impl RemoteCaptioner {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self> {
        Ok(Self {
            endpoint: endpoint.into(),
            client: http_client(timeout)?,
        })
    }
}

impl CaptionProvider for RemoteCaptioner {
    fn caption(&self, audio_ref: &str) -> Result<String> {
        let body = post_json(&self.client, &self.endpoint, &CaptionRequest { audio_uri: audio_ref })?;
        let resp: CaptionResponse =
            serde_json::from_slice(&body).map_err(|e| Error::MalformedResponse(e.to_string()))?;
        if resp.caption.is_empty() {
            return Err(Error::MalformedResponse("empty caption".into()));
        }
        Ok(resp.caption)
    }
}
