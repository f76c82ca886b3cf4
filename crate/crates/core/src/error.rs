use std::io;

/// Errors produced anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("embedding contains NaN or infinite values")]
    NonFinite,
    #[error("embedding must have at least one dimension")]
    EmptyEmbedding,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("duplicate entry id {0}")]
    DuplicateId(u64),
    #[error("entry {0} has an empty caption")]
    EmptyCaption(u64),
    #[error("knowledge base is empty")]
    EmptyKb,
    #[error("trainset is empty")]
    EmptyTrainset,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("unknown entry id {0}")]
    UnknownEntryId(u64),

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    VersionUnsupported(u16),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("metadata does not match embedding store: {0}")]
    MetadataMismatch(String),

    #[error("cluster count {n_clusters} invalid for {n} entries")]
    BadClusterCount { n_clusters: usize, n: usize },
    #[error("n_probe {n_probe} must be in 1..={n_clusters}")]
    BadProbeCount { n_probe: usize, n_clusters: usize },

    #[error("caption not found in encoder table: {0:?}")]
    UnknownCaption(String),
    #[error("audio reference not found: {0:?}")]
    UnknownAudioRef(String),
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("encoder returned non-finite values")]
    NonFiniteResponse,
    #[error("malformed encoder response: {0}")]
    MalformedResponse(String),
    #[error("encoder does not support {0} inputs")]
    UnsupportedModality(&'static str),

    #[error("strategy requires a shared audio/text space (d_A = {d_audio}, d_T = {d_text})")]
    SharedSpaceRequired { d_audio: usize, d_text: usize },
    #[error("pair strategies require a text query embedding")]
    MissingTextQuery,
    #[error("caption generation failed: {0}")]
    CaptionFailed(Box<Error>),
    #[error("text encoding failed: {0}")]
    EncodeFailed(Box<Error>),
    #[error("weight {0} outside [0, 1]")]
    InvalidWeight(f64),
    #[error("k must be positive")]
    InvalidK,

    #[error("candidate list is empty")]
    EmptyCandidates,
    #[error("no ranking for query {0}")]
    MissingRanking(u64),
    #[error("prediction and truth key sets differ")]
    KeyMismatch,
    #[error("retrieval produced no hits")]
    EmptyRetrieval,
    #[error("sweep axis values must be strictly increasing")]
    UnsortedAxis,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
