use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report. Gates that fail closed convert
/// these into rejections or withheld replies rather than propagating them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid identifier: {0}")]
    InvalidIdentifier(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("OCR backend unavailable: {0}")]
    OcrUnavailable(String),

    #[error("embedding backend unavailable: {0}")]
    EmbeddingUnavailable(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("corrupt store at {path}: {reason}")]
    CorruptStore { path: PathBuf, reason: String },

    #[error("request needs {needed} tokens but backend {backend} allows {limit}")]
    ContextOverflow {
        backend: String,
        needed: usize,
        limit: usize,
    },

    #[error("backend {backend} unavailable: {reason}")]
    BackendUnavailable { backend: String, reason: String },

    #[error("no registered backend offers {capability} for {needed} tokens")]
    NoCapableBackend { capability: String, needed: usize },

    #[error("no score in response {raw:?}")]
    ParseFailure { raw: String },

    #[error("unscorable response from {backend}: {raw:?}")]
    UnscorableResponse { backend: String, raw: String },

    #[error("unknown prompt template {0:?}")]
    UnknownTemplate(String),

    #[error("template {template} expects {expected} arguments, got {actual}")]
    TemplateArity {
        template: String,
        expected: usize,
        actual: usize,
    },

    #[error("corpus must contain both labels")]
    DegenerateCorpus,

    #[error("corpus line {line}: {reason}")]
    MalformedCorpus { line: usize, reason: String },

    #[error("source document {0} is missing")]
    SourceMissing(String),

    #[error("repository root {path} unavailable: {reason}")]
    RepoUnavailable { path: PathBuf, reason: String },

    #[error("paging is disabled")]
    PagingDisabled,

    #[error("search client unavailable: {0}")]
    SearchUnavailable(String),

    #[error("moderation service unavailable: {0}")]
    ModerationUnavailable(String),

    #[error("reply {0} not found")]
    NotFound(String),

    #[error("reply {id} is {state}; cannot {action}")]
    InvalidState {
        id: String,
        state: String,
        action: &'static str,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable code used on the wire and over FFI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidIdentifier(_) => "invalid_identifier",
            Error::InvalidInput(_) => "invalid_input",
            Error::OcrUnavailable(_) => "ocr_unavailable",
            Error::EmbeddingUnavailable(_) => "embedding_unavailable",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::CorruptStore { .. } => "corrupt_store",
            Error::ContextOverflow { .. } => "context_overflow",
            Error::BackendUnavailable { .. } => "backend_unavailable",
            Error::NoCapableBackend { .. } => "no_capable_backend",
            Error::ParseFailure { .. } => "parse_failure",
            Error::UnscorableResponse { .. } => "unscorable_response",
            Error::UnknownTemplate(_) => "unknown_template",
            Error::TemplateArity { .. } => "template_arity",
            Error::DegenerateCorpus => "degenerate_corpus",
            Error::MalformedCorpus { .. } => "malformed_corpus",
            Error::SourceMissing(_) => "source_missing",
            Error::RepoUnavailable { .. } => "repo_unavailable",
            Error::PagingDisabled => "paging_disabled",
            Error::SearchUnavailable(_) => "search_unavailable",
            Error::ModerationUnavailable(_) => "moderation_unavailable",
            Error::NotFound(_) => "not_found",
            Error::InvalidState { .. } => "invalid_state",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
