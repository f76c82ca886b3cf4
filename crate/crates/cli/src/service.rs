//! HTTP facade over an immutable knowledge-base snapshot.
//!
//! Every request clones the current `Arc<Snapshot>` once and works against it
//! to the end, so a concurrent `/reload` never changes what an in-flight
//! request sees. Scoring runs on the blocking pool.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use pairkb_core::fusion::{zero_shot_classify, CandidateText, FusionQuery};
use pairkb_core::providers::{CaptionProvider, EncodeInput, EncoderProvider};
use pairkb_core::refine::{refine_kb, RefineReport, REFINED_NAME};
use pairkb_core::retrieval::{generative_retrieve, RetrievalQuery, Retriever, Strategy};
use pairkb_core::store::load_embedding_store;
use pairkb_core::{Embedding, EntryId, Error, KnowledgeBase};

use crate::commands::{hit_records, HitRecord, ServeArgs};
use crate::config::EngineConfig;
use crate::specs;

/// A loaded knowledge base with its indexes.
#[derive(Debug)]
pub struct Snapshot {
    pub id: u64,
    pub retriever: Retriever,
    /// File the knowledge base was read from, if any.
    pub source: Option<PathBuf>,
}

impl Snapshot {
    pub fn kb(&self) -> &Arc<KnowledgeBase> {
        self.retriever.kb()
    }
}

pub struct AppState {
    cfg: EngineConfig,
    current: RwLock<Option<Arc<Snapshot>>>,
    next_id: AtomicU64,
    registry: RwLock<BTreeMap<String, Arc<KnowledgeBase>>>,
    refine_busy: AtomicBool,
    captioner: Option<Arc<dyn CaptionProvider>>,
    encoder: Option<Arc<dyn EncoderProvider>>,
}

/// Held while a refine job runs; a second job is refused until it drops.
pub struct RefineGuard(Arc<AppState>);

impl Drop for RefineGuard {
    fn drop(&mut self) {
        self.0.refine_busy.store(false, Ordering::Release);
    }
}

impl AppState {
    pub fn new(
        cfg: EngineConfig,
        captioner: Option<Arc<dyn CaptionProvider>>,
        encoder: Option<Arc<dyn EncoderProvider>>,
    ) -> Arc<Self> {
        Arc::new(Self {
            cfg,
            current: RwLock::new(None),
            next_id: AtomicU64::new(0),
            registry: RwLock::new(BTreeMap::new()),
            refine_busy: AtomicBool::new(false),
            captioner,
            encoder,
        })
    }

    pub fn snapshot(&self) -> Option<Arc<Snapshot>> {
        self.current.read().clone()
    }

    /// Builds indexes for `kb` and swaps it in. Returns the new snapshot id.
    pub fn install(&self, kb: Arc<KnowledgeBase>, source: Option<PathBuf>) -> pairkb_core::Result<u64> {
        let retriever = Retriever::new(kb.clone())?
            .with_exact_threshold(self.cfg.exact_threshold)
            .with_overfetch(self.cfg.overfetch);
        self.registry.write().insert(kb.name().to_string(), kb);
        let mut current = self.current.write();
        let id = self.next_id.fetch_add(1, Ordering::AcqRel) + 1;
        *current = Some(Arc::new(Snapshot { id, retriever, source }));
        Ok(id)
    }

    pub fn load_and_install(&self, path: &Path) -> anyhow::Result<u64> {
        let path = self.cfg.resolve(path);
        let kb = load_embedding_store(&path).with_context(|| format!("loading {}", path.display()))?;
        Ok(self.install(Arc::new(kb), Some(path))?)
    }

    pub fn register(&self, name: impl Into<String>, kb: Arc<KnowledgeBase>) {
        self.registry.write().insert(name.into(), kb);
    }

    pub fn try_begin_refine(self: &Arc<Self>) -> Option<RefineGuard> {
        self.refine_busy
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .ok()
            .map(|_| RefineGuard(self.clone()))
    }

    /// A store file (as given, under `data_dir`, or `<data_dir>/<name>.pkb`),
    /// falling back to a registered name.
    fn find_kb(&self, name: &str) -> Result<(Arc<KnowledgeBase>, Option<PathBuf>), ApiError> {
        let mut candidates = vec![self.cfg.resolve(Path::new(name))];
        if let Some(dir) = &self.cfg.data_dir {
            candidates.push(dir.join(format!("{name}.pkb")));
        }
        if let Some(path) = candidates.into_iter().find(|p| p.is_file()) {
            let kb = load_embedding_store(&path).map_err(|e| ApiError::from_core(&e))?;
            return Ok((Arc::new(kb), Some(path)));
        }
        self.registry
            .read()
            .get(name)
            .cloned()
            .map(|kb| (kb, None))
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown knowledge base {name:?}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn no_snapshot() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "no knowledge base loaded")
    }

    fn from_core(e: &Error) -> Self {
        let status = match e {
            Error::DimMismatch { .. }
            | Error::ZeroVector
            | Error::NonFinite
            | Error::EmptyEmbedding
            | Error::InvalidWeight(_)
            | Error::InvalidK
            | Error::InvalidArgument(_)
            | Error::EmptyCandidates
            | Error::EmptyCaption(_)
            | Error::DuplicateId(_) => StatusCode::BAD_REQUEST,
            Error::MissingTextQuery
            | Error::SharedSpaceRequired { .. }
            | Error::CaptionFailed(_)
            | Error::EncodeFailed(_)
            | Error::UnknownCaption(_)
            | Error::UnknownAudioRef(_)
            | Error::UnsupportedModality(_)
            | Error::SchemaMismatch(_)
            | Error::EmptyTrainset
            | Error::EmptyKb => StatusCode::UNPROCESSABLE_ENTITY,
            Error::UnknownEntryId(_) => StatusCode::NOT_FOUND,
            Error::Timeout | Error::Transport(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self::from_core(&e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryBody {
    #[serde(default)]
    audio: Option<Vec<f32>>,
    #[serde(default)]
    audio_ref: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum TextBody {
    Caption(String),
    Embedding(Vec<f32>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchRequest {
    strategy: String,
    k: usize,
    #[serde(default, rename = "W", alias = "w")]
    w: Option<f64>,
    query: QueryBody,
    #[serde(default)]
    text: Option<TextBody>,
    #[serde(default)]
    exclude_ids: Vec<EntryId>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SearchResponse {
    pub snapshot_id: u64,
    pub kb: String,
    pub hits: Vec<HitRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_query: Option<String>,
}

fn search_blocking(state: &AppState, snap: &Snapshot, req: SearchRequest) -> ApiResult<SearchResponse> {
    let is_pair = Strategy::parse(&req.strategy, None)
        .map_err(|e| ApiError::bad_request(e.to_string()))?
        .is_pair();
    let w = if is_pair { req.w.or(Some(state.cfg.default_w)) } else { req.w };
    let strategy = Strategy::parse(&req.strategy, w).map_err(|e| ApiError::bad_request(e.to_string()))?;
    if req.k == 0 {
        return Err(ApiError::bad_request("k must be at least 1"));
    }
    let kb = snap.kb();
    let audio = match (req.query.audio, &req.query.audio_ref) {
        (Some(v), _) => Embedding::new(v)?,
        (None, Some(r)) => kb
            .find_by_audio_uri(r)
            .map(|e| e.audio.clone())
            .ok_or_else(|| ApiError::unprocessable(format!("cannot resolve audio_ref {r:?}")))?,
        (None, None) => return Err(ApiError::bad_request("query needs audio or audio_ref")),
    };
    let exclude: Option<HashSet<EntryId>> =
        (!req.exclude_ids.is_empty()).then(|| req.exclude_ids.iter().copied().collect());
    let (text, text_query) = match req.text {
        Some(TextBody::Embedding(v)) => (Some(Embedding::new(v)?), None),
        Some(TextBody::Caption(s)) => {
            let enc = state
                .encoder
                .as_ref()
                .ok_or_else(|| ApiError::unprocessable("no text encoder configured"))?;
            let t = enc
                .encode(EncodeInput::Text(&s))
                .map_err(|e| ApiError::from_core(&Error::EncodeFailed(Box::new(e))))?;
            (Some(t), Some(s))
        }
        None => (None, None),
    };
    if let (Strategy::GenerativePairToPair(w), None) = (strategy, &text) {
        let audio_ref = req
            .query
            .audio_ref
            .as_deref()
            .ok_or_else(|| ApiError::unprocessable("generative retrieval needs query.audio_ref"))?;
        let (Some(captioner), Some(encoder)) = (&state.captioner, &state.encoder) else {
            return Err(ApiError::unprocessable("generative retrieval needs a captioner and a text encoder"));
        };
        let res = generative_retrieve(
            &snap.retriever,
            &audio,
            audio_ref,
            captioner.as_ref(),
            encoder.as_ref(),
            w,
            req.k,
            exclude.as_ref(),
        )?;
        return Ok(SearchResponse {
            snapshot_id: snap.id,
            kb: kb.name().to_string(),
            hits: hit_records(kb, &res.hits),
            text_query: Some(res.text_query),
        });
    }
    let q = RetrievalQuery {
        audio,
        text,
        text_query: text_query.clone(),
        audio_ref: req.query.audio_ref,
    };
    let hits = snap.retriever.retrieve(strategy, &q, req.k, exclude.as_ref())?;
    Ok(SearchResponse {
        snapshot_id: snap.id,
        kb: kb.name().to_string(),
        hits: hit_records(kb, &hits),
        text_query,
    })
}

async fn search(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<SearchResponse>> {
    let snap = state.snapshot().ok_or_else(ApiError::no_snapshot)?;
    let req: SearchRequest = parse_body(&body)?;
    let st = state.clone();
    blocking(move || search_blocking(&st, &snap, req)).await.map(Json)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RefineRequest {
    trainset: String,
    k: usize,
    /// Defaults to the served knowledge base.
    #[serde(default)]
    kb: Option<String>,
    #[serde(default)]
    exclude_self: bool,
    /// Registry name for the result.
    #[serde(default)]
    name: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RefineResponse {
    pub name: String,
    pub report: RefineReport,
}

async fn refine(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<RefineResponse>)> {
    let req: RefineRequest = parse_body(&body)?;
    if req.k == 0 {
        return Err(ApiError::bad_request("k must be at least 1"));
    }
    let guard = state
        .try_begin_refine()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "a refine job is already running"))?;
    let st = state.clone();
    let resp = blocking(move || {
        let _guard = guard;
        let kb = match &req.kb {
            Some(name) => st.find_kb(name)?.0,
            None => st.snapshot().ok_or_else(ApiError::no_snapshot)?.kb().clone(),
        };
        let (trainset, _) = st.find_kb(&req.trainset)?;
        let (refined, report) = refine_kb(&kb, &trainset, req.k, req.exclude_self)?;
        let name = req.name.unwrap_or_else(|| REFINED_NAME.to_string());
        st.register(name.clone(), Arc::new(refined));
        Ok(RefineResponse { name, report })
    })
    .await?;
    Ok((StatusCode::ACCEPTED, Json(resp)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifyRequest {
    audio: Vec<f32>,
    #[serde(default)]
    gen_text: Option<Vec<f32>>,
    #[serde(default)]
    audio_ref: Option<String>,
    classes: Vec<ClassBody>,
}

#[derive(Debug, Deserialize)]
struct ClassBody {
    id: u64,
    text: String,
    emb: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub class_id: u64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen_caption: Option<String>,
}

fn classify_blocking(state: &AppState, req: ClassifyRequest) -> ApiResult<ClassifyResponse> {
    let classes = req
        .classes
        .into_iter()
        .map(|c| CandidateText::new(c.id, c.text, Embedding::new(c.emb)?))
        .collect::<pairkb_core::Result<Vec<_>>>()?;
    let (gen_text, gen_caption) = match (req.gen_text, req.audio_ref) {
        (Some(v), _) => (Embedding::new(v)?, None),
        (None, Some(r)) => {
            let (Some(captioner), Some(encoder)) = (&state.captioner, &state.encoder) else {
                return Err(ApiError::unprocessable("captioning needs a captioner and a text encoder"));
            };
            let caption = captioner
                .caption(&r)
                .map_err(|e| Error::CaptionFailed(Box::new(e)))?;
            let emb = encoder
                .encode(EncodeInput::Text(&caption))
                .map_err(|e| Error::EncodeFailed(Box::new(e)))?;
            (emb, Some(caption))
        }
        (None, None) => return Err(ApiError::bad_request("pass gen_text or audio_ref")),
    };
    let q = FusionQuery {
        audio: pairkb_core::l2_normalize(&Embedding::new(req.audio)?)?,
        gen_text,
    };
    let (class_id, score) = zero_shot_classify(&q, &classes)?;
    Ok(ClassifyResponse {
        class_id,
        score,
        gen_caption,
    })
}

async fn classify(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<ClassifyResponse>> {
    let req: ClassifyRequest = parse_body(&body)?;
    let st = state.clone();
    blocking(move || classify_blocking(&st, req)).await.map(Json)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EntryResponse {
    pub id: EntryId,
    pub caption: String,
    pub audio_uri: String,
    pub source: String,
}

async fn entry(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<EntryId>) -> ApiResult<Json<EntryResponse>> {
    let snap = state.snapshot().ok_or_else(ApiError::no_snapshot)?;
    let e = snap
        .kb()
        .get(id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no entry {id}")))?;
    Ok(Json(EntryResponse {
        id: e.id,
        caption: e.caption.clone(),
        audio_uri: e.audio_uri.clone(),
        source: e.source.clone(),
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub snapshot_id: Option<u64>,
    pub kb: Option<String>,
    pub kb_size: usize,
}

async fn healthz(State(state): State<Arc<AppState>>) -> (StatusCode, Json<Health>) {
    match state.snapshot() {
        Some(s) => (
            StatusCode::OK,
            Json(Health {
                status: "ok".into(),
                snapshot_id: Some(s.id),
                kb: Some(s.kb().name().to_string()),
                kb_size: s.kb().len(),
            }),
        ),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(Health {
                status: "no_snapshot".into(),
                snapshot_id: None,
                kb: None,
                kb_size: 0,
            }),
        ),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReloadRequest {
    /// Store path or registered name; defaults to re-reading the current source.
    #[serde(default)]
    kb: Option<String>,
}

async fn reload(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Health>> {
    let req: ReloadRequest = if body.iter().all(u8::is_ascii_whitespace) {
        ReloadRequest::default()
    } else {
        parse_body(&body)?
    };
    let st = state.clone();
    blocking(move || {
        let (kb, source) = match req.kb {
            Some(name) => st.find_kb(&name)?,
            None => {
                let source = st
                    .snapshot()
                    .and_then(|s| s.source.clone())
                    .ok_or_else(|| ApiError::bad_request("nothing to reload; pass \"kb\""))?;
                let kb = load_embedding_store(&source)?;
                (Arc::new(kb), Some(source))
            }
        };
        let size = kb.len();
        let name = kb.name().to_string();
        let id = st.install(kb, source)?;
        Ok(Health {
            status: "ok".into(),
            snapshot_id: Some(id),
            kb: Some(name),
            kb_size: size,
        })
    })
    .await
    .map(Json)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/search", post(search))
        .route("/refine", post(refine))
        .route("/classify", post(classify))
        .route("/entries/{id}", get(entry))
        .route("/healthz", get(healthz))
        .route("/reload", post(reload))
        .with_state(state)
}

pub fn serve(cfg: EngineConfig, args: ServeArgs) -> anyhow::Result<()> {
    let captioner = args
        .captioner
        .clone()
        .or_else(|| specs::default_captioner(&cfg))
        .map(|s| specs::captioner(&s, &cfg))
        .transpose()?;
    let kb_path = args.kb.clone();
    let initial = kb_path
        .as_deref()
        .map(|p| load_embedding_store(&cfg.resolve(p)).map(Arc::new))
        .transpose()?;
    let encoder = args
        .encoder
        .clone()
        .or_else(|| specs::default_encoder(&cfg))
        .map(|s| specs::text_encoder(&s, &cfg, initial.as_ref().map(|kb| kb.schema().d_text)))
        .transpose()?;
    let state = AppState::new(cfg.clone(), captioner, encoder);
    if let (Some(kb), Some(p)) = (initial, kb_path) {
        state.install(kb, Some(cfg.resolve(&p)))?;
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&args.listen)
            .await
            .with_context(|| format!("binding {}", args.listen))?;
        log::info!("listening on {}", listener.local_addr()?);
        eprintln!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
