//! Deployable surface: configuration, reply persistence, message intake and
//! the HTTP API.

pub mod config;
pub mod http;
pub mod persist;
pub mod runtime;

pub use config::{EmbeddingConfig, ServiceConfig, StorePaths, WebSearchConfig, CONFIG_ENV};
pub use http::{router, status_for, ApiError, MessageAccepted};
pub use persist::{FileSink, LogLine, STATE_FILE, TRACE_LOG};
pub use runtime::{
    build_embedder, build_gateway, build_pipeline, open_store, store_path, Accepted, KnowledgeAdded, KnowledgeUpload,
    Service, UploadedDocument,
};
