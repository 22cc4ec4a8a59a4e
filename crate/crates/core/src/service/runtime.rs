use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use super::config::{EmbeddingConfig, ServiceConfig};
use super::persist::FileSink;
use crate::error::{Error, Result};
use crate::llm::{ChatBackend, Gateway, HttpChatBackend, PromptLibrary, ScriptedBackend, TokenCounter};
use crate::moderation::{HttpModerator, Moderator};
use crate::preprocess::{
    Aggregator, DropReason, Filtered, HttpOcr, NoopOcr, OcrBackend, PreprocessConfig, QueryBundle, RawMessage,
};
use crate::response::{ImAdapter, NullAdapter, Pipeline, ReplyBook, ReplyRecord, Tunables, WebhookAdapter};
use crate::retrieval::{HttpPageFetcher, HttpSearchClient, WebSources};
use crate::store::{DocumentRecord, Embedder, FeatureStore, HttpEmbedder, MockEmbedder, StoreRole};

const DEMO_BACKEND: &str = "scripted:demo";
const SERVICE_TIMEOUT: Duration = Duration::from_secs(10);

/// What happened to one inbound message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accepted {
    pub message_id: String,
    pub kept: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_reason: Option<DropReason>,
    /// Bundles flushed by this arrival and queued for answering.
    pub bundles: Vec<QueryBundle>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadedDocument {
    pub source_path: String,
    pub text: String,
    #[serde(default = "default_mime")]
    pub mime: String,
}

fn default_mime() -> String {
    "text/markdown".into()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeUpload {
    pub documents: Vec<UploadedDocument>,
    /// Also add the documents to the rejection store.
    #[serde(default)]
    pub rejection: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeAdded {
    pub response_chunks: usize,
    pub rejection_chunks: usize,
}

pub fn build_embedder(cfg: &EmbeddingConfig) -> Arc<dyn Embedder> {
    match cfg {
        EmbeddingConfig::Mock { dim } => Arc::new(MockEmbedder::new(*dim)),
        EmbeddingConfig::Http {
            endpoint,
            dim,
            timeout_secs,
        } => Arc::new(HttpEmbedder::new(endpoint.clone(), *dim, Duration::from_secs(*timeout_secs))),
    }
}

fn backend_client(endpoint: &str, timeout: Duration) -> Result<Arc<dyn ChatBackend>> {
    if endpoint == DEMO_BACKEND {
        return Ok(Arc::new(crate::testing::fixtures::backend()));
    }
    if let Some(path) = endpoint.strip_prefix("scripted:") {
        return Ok(Arc::new(ScriptedBackend::from_file(Path::new(path))?));
    }
    if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
        return Ok(Arc::new(HttpChatBackend::new(endpoint, timeout)));
    }
    Err(Error::Config(format!("unsupported backend endpoint {endpoint:?}")))
}

pub fn build_gateway(cfg: &ServiceConfig) -> Result<Gateway> {
    let mut prompts = PromptLibrary::default();
    if let Some(dir) = &cfg.prompts_dir {
        prompts = prompts.with_overrides(dir)?;
    }
    let mut gateway = Gateway::new(TokenCounter::default())
        .with_prompts(prompts)
        .with_scoring_examples(cfg.scoring_examples);
    let timeout = Duration::from_secs(cfg.backend_timeout_secs);
    for profile in &cfg.backends {
        gateway.register(profile.clone(), backend_client(&profile.endpoint, timeout)?)?;
    }
    Ok(gateway)
}

pub fn open_store(cfg: &ServiceConfig, role: StoreRole) -> Result<FeatureStore> {
    FeatureStore::open_or_create(store_path(cfg, role), build_embedder(&cfg.embedding), cfg.splitter)
}

pub fn store_path(cfg: &ServiceConfig, role: StoreRole) -> &Path {
    match role {
        StoreRole::Rejection => &cfg.store_paths.rejection,
        StoreRole::Response => &cfg.store_paths.response,
    }
}

/// Builds the pipeline described by `cfg`, with replies persisted under
/// `data_dir` and restored from the last snapshot.
pub fn build_pipeline(cfg: &ServiceConfig) -> Result<Pipeline> {
    let sink = Arc::new(FileSink::open(&cfg.data_dir)?);
    let book = ReplyBook::new().with_sink(sink.clone());
    book.restore(sink.snapshot());

    let moderator: Option<Arc<dyn Moderator>> = cfg
        .moderation
        .as_ref()
        .map(|url| Arc::new(HttpModerator::new(url.clone(), SERVICE_TIMEOUT)) as Arc<dyn Moderator>);
    let im: Arc<dyn ImAdapter> = match &cfg.im_webhook {
        Some(url) => Arc::new(WebhookAdapter::new(url.clone(), SERVICE_TIMEOUT)),
        None => Arc::new(NullAdapter),
    };
    let mut pipeline = Pipeline::new(
        Arc::new(build_gateway(cfg)?),
        Arc::new(RwLock::new(open_store(cfg, StoreRole::Rejection)?)),
        Arc::new(RwLock::new(open_store(cfg, StoreRole::Response)?)),
    )
    .with_routes(cfg.routes.clone())
    .with_budgets(cfg.budgets.clone())?
    .with_retrieval(cfg.retrieval_settings())
    .with_tunables(Tunables {
        thresholds: cfg.thresholds,
        working_hours: cfg.working_hours.clone(),
    })?
    .with_im(im)
    .with_book(Arc::new(book));
    if let Some(web) = &cfg.web_search {
        pipeline = pipeline.with_web(WebSources {
            client: Some(Arc::new(HttpSearchClient::new(web.endpoint.clone(), SERVICE_TIMEOUT))),
            fetcher: Some(Arc::new(HttpPageFetcher::new(Duration::from_secs(web.fetch_timeout_secs)))),
            moderator: moderator.clone(),
            max_results: web.max_results,
        });
    }
    if let Some(m) = moderator {
        pipeline = pipeline.with_moderator(m);
    }
    Ok(pipeline)
}

/// Message intake, aggregation and a bounded pool of pipeline workers.
pub struct Service {
    pipeline: Arc<Pipeline>,
    aggregator: Mutex<Aggregator>,
    ocr: Arc<dyn OcrBackend>,
    workers: Arc<Semaphore>,
    store_roots: Option<(PathBuf, PathBuf)>,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service")
            .field("pending_users", &self.aggregator.lock().unwrap().pending_users())
            .field("idle_workers", &self.workers.available_permits())
            .finish_non_exhaustive()
    }
}

impl Service {
    pub fn new(pipeline: Pipeline, preprocess: PreprocessConfig, workers: usize) -> Self {
        Service {
            pipeline: Arc::new(pipeline),
            aggregator: Mutex::new(Aggregator::new(preprocess)),
            ocr: Arc::new(NoopOcr),
            workers: Arc::new(Semaphore::new(workers.max(1))),
            store_roots: None,
        }
    }

    pub fn from_config(cfg: &ServiceConfig) -> Result<Self> {
        let mut service = Service::new(build_pipeline(cfg)?, cfg.preprocess.clone(), cfg.workers);
        if let Some(url) = &cfg.ocr_endpoint {
            service.ocr = Arc::new(HttpOcr::new(url.clone(), SERVICE_TIMEOUT));
        }
        service.store_roots = Some((cfg.store_paths.rejection.clone(), cfg.store_paths.response.clone()));
        Ok(service)
    }

    pub fn with_ocr(mut self, ocr: Arc<dyn OcrBackend>) -> Self {
        self.ocr = ocr;
        self
    }

    /// Stores written by knowledge uploads are persisted back to these roots.
    pub fn with_store_roots(mut self, rejection: PathBuf, response: PathBuf) -> Self {
        self.store_roots = Some((rejection, response));
        self
    }

    pub fn pipeline(&self) -> &Arc<Pipeline> {
        &self.pipeline
    }

    fn now(&self) -> i64 {
        self.pipeline.clock().now().timestamp()
    }

    /// Filters and packs `msg`, then flushes everything that is due.
    pub fn accept(&self, msg: &RawMessage) -> Result<Accepted> {
        let mut agg = self.aggregator.lock().unwrap();
        let (filtered, mut bundles) = agg.offer(msg, self.ocr.as_ref())?;
        bundles.extend(agg.tick(self.now()));
        let (kept, drop_reason) = match filtered {
            Filtered::Keep(_) => (true, None),
            Filtered::Drop(r) => (false, Some(r)),
        };
        Ok(Accepted {
            message_id: msg.message_id.clone(),
            kept,
            drop_reason,
            bundles,
        })
    }

    /// Bundles that went idle or outlived their window.
    pub fn due(&self) -> Vec<QueryBundle> {
        self.aggregator.lock().unwrap().tick(self.now())
    }

    pub fn flush_all(&self) -> Vec<QueryBundle> {
        self.aggregator.lock().unwrap().flush_all()
    }

    /// Runs bundles on the worker pool. Results keep input order.
    pub async fn process(&self, bundles: Vec<QueryBundle>) -> Vec<Result<ReplyRecord>> {
        let tasks: Vec<_> = bundles
            .into_iter()
            .map(|bundle| {
                let pipeline = Arc::clone(&self.pipeline);
                let workers = Arc::clone(&self.workers);
                tokio::spawn(async move {
                    let _permit = workers.acquire_owned().await.map_err(|e| Error::Config(e.to_string()))?;
                    tokio::task::spawn_blocking(move || pipeline.run(&bundle))
                        .await
                        .map_err(|e| Error::Config(format!("worker panicked: {e}")))?
                })
            })
            .collect();
        let mut out = Vec::with_capacity(tasks.len());
        for t in tasks {
            out.push(t.await.unwrap_or_else(|e| Err(Error::Config(format!("worker panicked: {e}")))));
        }
        for r in &out {
            if let Err(err) = r {
                tracing::error!(%err, "pipeline run failed");
            }
        }
        out
    }

    /// Fire-and-forget variant of [`Service::process`].
    pub fn spawn(self: &Arc<Self>, bundles: Vec<QueryBundle>) -> Option<tokio::task::JoinHandle<()>> {
        if bundles.is_empty() {
            return None;
        }
        let this = Arc::clone(self);
        Some(tokio::spawn(async move {
            this.process(bundles).await;
        }))
    }

    /// Periodically flushes idle bundles until the task is aborted.
    pub fn spawn_ticker(self: &Arc<Self>, every: Duration) -> tokio::task::JoinHandle<()> {
        let this = Arc::clone(self);
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(every);
            interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                interval.tick().await;
                let due = this.due();
                if !due.is_empty() {
                    this.process(due).await;
                }
            }
        })
    }

    pub fn withdraw(&self, reply_id: &str) -> Result<ReplyRecord> {
        self.pipeline.withdraw(reply_id)
    }

    /// Adds documents to the response store, and the rejection store when
    /// asked, persisting any store that changed.
    pub fn add_knowledge(&self, upload: &KnowledgeUpload) -> Result<KnowledgeAdded> {
        for d in &upload.documents {
            if d.source_path.trim().is_empty() {
                return Err(Error::InvalidInput("document source_path must be non-empty".into()));
            }
        }
        let add = |store: &RwLock<FeatureStore>, root: Option<&Path>| -> Result<usize> {
            let mut store = store.write().unwrap();
            let mut added = 0;
            for d in &upload.documents {
                added += store.add_document(DocumentRecord::new(&d.source_path, &d.text, &d.mime))?;
            }
            if added > 0 {
                if let Some(root) = root {
                    store.persist(root)?;
                }
            }
            Ok(added)
        };
        let roots = self.store_roots.as_ref();
        let response_chunks = add(self.pipeline.response_store(), roots.map(|r| r.1.as_path()))?;
        let rejection_chunks = if upload.rejection {
            add(self.pipeline.rejection_store(), roots.map(|r| r.0.as_path()))?
        } else {
            0
        };
        Ok(KnowledgeAdded {
            response_chunks,
            rejection_chunks,
        })
    }
}
