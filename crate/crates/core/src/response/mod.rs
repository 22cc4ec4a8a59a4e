//! Orchestration of one query from triage to delivery, with an auditable
//! trace and a withdrawable reply record.

mod clock;
mod gates;
mod im;
mod record;

pub use clock::{Clock, FixedClock, SystemClock, WorkingHours};
pub use gates::{
    answer_request, generate_answer, relevance_gate, security_gate, Generated, ScoredCheck, SecurityCheck,
    SecurityReason, SecurityVerdict,
};
pub use im::{ImAdapter, ImEvent, ImEventType, NullAdapter, RecordingAdapter, WebhookAdapter};
pub use record::{GateEntry, GateOutcome, GateTrace, ReplyBook, ReplyRecord, ReplySink, ReplyState};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::llm::{Capability, Gateway};
use crate::moderation::Moderator;
use crate::preprocess::{QueryBundle, UserKey};
use crate::rejection::{self, RejectionThresholds, Stage};
use crate::retrieval::{
    self, assemble_context, chunk_piece, fetch_source, knowledge_search, paging_query, paging_summarize,
    repo_search, rerank_by_llm, route_repo, web_search, ContextPiece, RepoRoutes, Source, WebSources,
};
use crate::store::FeatureStore;
use crate::util::sha256_hex;

pub const DEFAULT_ANSWER_THRESHOLD: u8 = 5;
pub const DEFAULT_SECURITY_THRESHOLD: u8 = 7;

/// All score thresholds. Similarity is a cosine in `[-1, 1]`; the rest are
/// LLM scores in `[0, 10]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub similarity: f32,
    pub question: u8,
    pub relevance: u8,
    pub answer: u8,
    pub security: u8,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            similarity: rejection::DEFAULT_SIMILARITY_THRESHOLD,
            question: rejection::DEFAULT_QUESTION_THRESHOLD,
            relevance: retrieval::DEFAULT_RELEVANCE_THRESHOLD,
            answer: DEFAULT_ANSWER_THRESHOLD,
            security: DEFAULT_SECURITY_THRESHOLD,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.similarity) {
            return Err(Error::InvalidInput(format!(
                "similarity threshold {} outside [-1, 1]",
                self.similarity
            )));
        }
        for (name, v) in [
            ("question", self.question),
            ("relevance", self.relevance),
            ("answer", self.answer),
            ("security", self.security),
        ] {
            if v > 10 {
                return Err(Error::InvalidInput(format!("{name} threshold {v} outside [0, 10]")));
            }
        }
        Ok(())
    }

    pub fn rejection(&self) -> RejectionThresholds {
        RejectionThresholds {
            similarity: self.similarity,
            question: self.question,
        }
    }
}

/// The settings that may change while running.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tunables {
    pub thresholds: Thresholds,
    pub working_hours: WorkingHours,
}

impl Tunables {
    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        self.working_hours
            .validate()
            .map_err(|e| Error::InvalidInput(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budgets {
    pub budget_tokens: usize,
    /// Used instead of `budget_tokens` when a long-context backend exists.
    pub long_context_budget_tokens: usize,
    pub reserve_tokens: usize,
    pub piece_cap_tokens: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            budget_tokens: retrieval::DEFAULT_BUDGET_TOKENS,
            long_context_budget_tokens: retrieval::LONG_CONTEXT_BUDGET_TOKENS,
            reserve_tokens: retrieval::DEFAULT_RESERVE_TOKENS,
            piece_cap_tokens: retrieval::DEFAULT_PIECE_CAP_TOKENS,
        }
    }
}

impl Budgets {
    pub fn validate(&self) -> Result<()> {
        if self.budget_tokens <= self.reserve_tokens || self.long_context_budget_tokens <= self.reserve_tokens {
            return Err(Error::Config("budgets must exceed reserve_tokens".into()));
        }
        if self.piece_cap_tokens == 0 {
            return Err(Error::Config("piece_cap_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSettings {
    /// Hits taken per keyword phrase.
    pub knowledge_k: usize,
    pub max_rerank: usize,
    pub max_repo_files: usize,
    pub paging_enabled: bool,
    pub priority: Vec<Source>,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        RetrievalSettings {
            knowledge_k: 4,
            max_rerank: retrieval::DEFAULT_MAX_RERANK,
            max_repo_files: retrieval::DEFAULT_MAX_REPO_FILES,
            paging_enabled: false,
            priority: vec![Source::Knowledge, Source::Repo, Source::Web],
        }
    }
}

/// Stable id for the reply to `bundle`.
pub fn reply_id_for(bundle: &QueryBundle) -> String {
    let key = format!(
        "{}\n{}\n{}\n{}\n{}",
        bundle.user_key,
        bundle.window_start,
        bundle.window_end,
        bundle.source_message_ids.join(","),
        bundle.text
    );
    sha256_hex(key)[..16].to_owned()
}

pub struct Pipeline {
    gateway: Arc<Gateway>,
    rejection_store: Arc<RwLock<FeatureStore>>,
    response_store: Arc<RwLock<FeatureStore>>,
    moderator: Option<Arc<dyn Moderator>>,
    web: WebSources,
    routes: RepoRoutes,
    budgets: Budgets,
    retrieval: RetrievalSettings,
    tunables: RwLock<Tunables>,
    clock: Arc<dyn Clock>,
    im: Arc<dyn ImAdapter>,
    book: Arc<ReplyBook>,
    user_locks: Mutex<HashMap<UserKey, Arc<Mutex<()>>>>,
    paging_cache: Mutex<HashMap<String, BTreeMap<String, String>>>,
}

impl Pipeline {
    pub fn new(
        gateway: Arc<Gateway>,
        rejection_store: Arc<RwLock<FeatureStore>>,
        response_store: Arc<RwLock<FeatureStore>>,
    ) -> Self {
        Pipeline {
            gateway,
            rejection_store,
            response_store,
            moderator: None,
            web: WebSources::default(),
            routes: RepoRoutes::new(),
            budgets: Budgets::default(),
            retrieval: RetrievalSettings::default(),
            tunables: RwLock::new(Tunables::default()),
            clock: Arc::new(SystemClock),
            im: Arc::new(NullAdapter),
            book: Arc::new(ReplyBook::new()),
            user_locks: Mutex::new(HashMap::new()),
            paging_cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_moderator(mut self, moderator: Arc<dyn Moderator>) -> Self {
        self.moderator = Some(moderator);
        self
    }

    pub fn with_web(mut self, web: WebSources) -> Self {
        self.web = web;
        self
    }

    pub fn with_routes(mut self, routes: RepoRoutes) -> Self {
        self.routes = routes;
        self
    }

    pub fn with_budgets(mut self, budgets: Budgets) -> Result<Self> {
        budgets.validate()?;
        self.budgets = budgets;
        Ok(self)
    }

    pub fn with_retrieval(mut self, settings: RetrievalSettings) -> Self {
        self.retrieval = settings;
        self
    }

    pub fn with_tunables(self, tunables: Tunables) -> Result<Self> {
        self.set_tunables(tunables)?;
        Ok(self)
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_im(mut self, im: Arc<dyn ImAdapter>) -> Self {
        self.im = im;
        self
    }

    pub fn with_book(mut self, book: Arc<ReplyBook>) -> Self {
        self.book = book;
        self
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn book(&self) -> &Arc<ReplyBook> {
        &self.book
    }

    pub fn rejection_store(&self) -> &Arc<RwLock<FeatureStore>> {
        &self.rejection_store
    }

    pub fn response_store(&self) -> &Arc<RwLock<FeatureStore>> {
        &self.response_store
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn tunables(&self) -> Tunables {
        self.tunables.read().unwrap().clone()
    }

    pub fn set_tunables(&self, tunables: Tunables) -> Result<()> {
        tunables.validate()?;
        *self.tunables.write().unwrap() = tunables;
        Ok(())
    }

    fn budget(&self) -> usize {
        if self.gateway.profiles().any(|p| p.has(Capability::LongContext)) {
            self.budgets.long_context_budget_tokens
        } else {
            self.budgets.budget_tokens
        }
    }

    fn user_lock(&self, key: &UserKey) -> Arc<Mutex<()>> {
        Arc::clone(self.user_locks.lock().unwrap().entry(key.clone()).or_default())
    }

    /// Runs one bundle end to end. Gate failures are encoded in the record;
    /// only persistence errors are returned.
    pub fn run(&self, bundle: &QueryBundle) -> Result<ReplyRecord> {
        let lock = self.user_lock(&bundle.user_key);
        let _serial = lock.lock().unwrap();
        let now = self.clock.now();
        let pending = ReplyRecord {
            reply_id: reply_id_for(bundle),
            user_key: bundle.user_key.clone(),
            query_text: bundle.text.clone(),
            answer: None,
            citations: Vec::new(),
            trace: GateTrace::default(),
            state: ReplyState::Pending,
            reason: None,
            created_at: now,
            updated_at: now,
        };
        let id = self.book.insert(pending)?;
        let outcome = self.evaluate(bundle, &id);
        let finished = self.book.update(&id, |r| {
            r.trace = outcome.trace.clone();
            r.answer = outcome.answer.clone();
            r.citations = outcome.citations.clone();
            r.state = outcome.state;
            r.reason = outcome.reason.clone();
            r.updated_at = self.clock.now();
            Ok(true)
        })?;
        tracing::info!(reply_id = %finished.reply_id, state = %finished.state, reason = ?finished.reason, "query finished");
        Ok(finished)
    }

    fn evaluate(&self, bundle: &QueryBundle, reply_id: &str) -> Outcome {
        let mut o = Outcome::default();
        let tunables = self.tunables();
        let th = tunables.thresholds;
        let query = bundle.text.as_str();

        let now = self.clock.now();
        let wh = &tunables.working_hours;
        let detail = json!({
            "timezone": wh.timezone,
            "local_minute": wh.local_minute(now).ok(),
            "start_minute": wh.start_minute,
            "end_minute": wh.end_minute,
        });
        if !wh.allows(now).unwrap_or(false) {
            return o.fail(self, "working_hours", detail, "out_of_hours");
        }
        o.pass(self, "working_hours", detail);

        let decision = {
            let store = self.rejection_store.read().unwrap();
            rejection::decide(query, &store, &self.gateway, &th.rejection())
        };
        let decision = match decision {
            Ok(d) => d,
            Err(err) => return o.fail(self, "rejection/similarity", json!({"error": err.to_string()}), "rejected"),
        };
        let sim_detail = serde_json::to_value(&decision.similarity).unwrap_or_default();
        if decision.stage == Stage::Similarity {
            return o.fail(self, "rejection/similarity", sim_detail, "rejected");
        }
        o.pass(self, "rejection/similarity", sim_detail);
        let q_detail = serde_json::to_value(&decision.question).unwrap_or_default();
        if decision.stage == Stage::QuestionScore {
            return o.fail(self, "rejection/question_score", q_detail, "rejected");
        }
        o.pass(self, "rejection/question_score", q_detail);

        let keywords = match retrieval::extract_keywords(&self.gateway, query) {
            Ok(k) => k,
            Err(err) => return o.fail(self, "keywords", json!({"error": err.to_string()}), "invalid_query"),
        };
        o.pass(self, "keywords", json!({"keywords": keywords.items, "warnings": keywords.warnings}));
        let keywords = keywords.items;

        let mut pieces = Vec::new();
        pieces.extend(self.knowledge(query, &keywords, th.relevance, &mut o));
        let route = route_repo(&self.routes, bundle.user_key.group_id());
        match route {
            None => o.entry(self, "repo", GateOutcome::Skip, json!({"reason": "no repository routed"})),
            Some(route) => {
                let found = if self.retrieval.paging_enabled {
                    self.paged(query, &keywords, route)
                } else {
                    repo_search(route, &keywords, self.retrieval.max_repo_files, self.gateway.counter())
                        .map(retrieval::Found::ok)
                };
                match found {
                    Ok(f) => {
                        o.pass(self, "repo", json!({"repo": route.repo_name, "pieces": f.items.len(), "warnings": f.warnings}));
                        pieces.extend(f.items);
                    }
                    Err(err) => o.entry(self, "repo", GateOutcome::Skip, json!({"error": err.to_string()})),
                }
            }
        }
        if self.web.client.is_none() {
            o.entry(self, "web", GateOutcome::Skip, json!({"reason": "no search client"}));
        } else {
            let domains = route.map(|r| r.doc_domains.as_slice()).unwrap_or_default();
            let found = web_search(&self.web, &self.gateway, query, &keywords, domains, th.relevance);
            o.pass(self, "web", json!({"results": found.items.len(), "warnings": found.warnings}));
            pieces.extend(found.items.iter().map(|w| {
                let mut p = w.to_piece(self.gateway.counter());
                p.truncate_to(self.budgets.piece_cap_tokens, self.gateway.counter());
                p
            }));
        }

        let budget = self.budget();
        let ctx = match assemble_context(
            pieces,
            budget,
            self.budgets.reserve_tokens,
            &self.retrieval.priority,
            self.gateway.counter(),
        ) {
            Ok(b) => b,
            Err(err) => return o.fail(self, "assemble", json!({"error": err.to_string()}), "assembly_failed"),
        };
        o.pass(
            self,
            "assemble",
            json!({
                "budget_tokens": budget,
                "reserve_tokens": self.budgets.reserve_tokens,
                "total_tokens": ctx.total_tokens,
                "pieces": ctx.pieces.iter().map(|p| json!({"source": p.source, "origin": p.origin, "tokens": p.tokens, "relevance": p.relevance})).collect::<Vec<_>>(),
            }),
        );

        let generated = match generate_answer(&self.gateway, query, &ctx) {
            Ok(g) => g,
            Err(err) => return o.fail(self, "generate", json!({"error": err.to_string()}), "generation_failed"),
        };
        o.pass(
            self,
            "generate",
            json!({"backend": generated.backend, "needed_tokens": generated.needed_tokens, "low_evidence": generated.low_evidence}),
        );

        let rel = relevance_gate(&self.gateway, query, &generated.text, th.answer);
        let rel_detail = serde_json::to_value(&rel).unwrap_or_default();
        if !rel.passed {
            return o.fail(self, "relevance", rel_detail, "low_relevance");
        }
        o.pass(self, "relevance", rel_detail);

        let verdict = security_gate(&self.gateway, self.moderator.as_deref(), &[&generated.text], th.security);
        let sec_detail = serde_json::to_value(&verdict).unwrap_or_default();
        if !verdict.allowed {
            return o.fail(self, "security", sec_detail, "security");
        }
        o.pass(self, "security", sec_detail);

        let event = ImEvent {
            kind: ImEventType::Send,
            group_id: bundle.user_key.group_id().to_owned(),
            reply_id: reply_id.to_owned(),
            text: generated.text.clone(),
        };
        if let Err(err) = self.im.deliver(&event) {
            return o.fail(self, "send", json!({"error": err.to_string()}), "delivery_failed");
        }
        o.pass(self, "send", json!({"group_id": event.group_id}));
        o.state = ReplyState::Sent;
        o.answer = Some(generated.text);
        o.citations = ctx.citations;
        o
    }

    fn knowledge(&self, query: &str, keywords: &[String], theta: u8, o: &mut Outcome) -> Vec<ContextPiece> {
        let store = self.response_store.read().unwrap();
        let counter = self.gateway.counter();
        let hits = knowledge_search(&store, keywords, self.retrieval.knowledge_k);
        let mut warnings = hits.warnings;
        let candidates: Vec<ContextPiece> = hits
            .items
            .iter()
            .take(self.retrieval.max_rerank)
            .map(|h| chunk_piece(&store, &h.chunk, counter))
            .collect();
        let n_candidates = candidates.len();
        let chunks: HashMap<(String, String, String), &crate::store::Chunk> = candidates
            .iter()
            .zip(&hits.items)
            .map(|(p, h)| ((p.origin.clone(), p.title.clone(), p.text.clone()), &h.chunk))
            .collect();
        let reranked = match rerank_by_llm(&self.gateway, query, candidates, theta, self.retrieval.max_rerank) {
            Ok(r) => r,
            Err(err) => retrieval::Found::warn(err.to_string()),
        };
        warnings.extend(reranked.warnings);

        let mut seen_docs = HashSet::new();
        let mut out = Vec::new();
        for piece in reranked.items {
            let key = (piece.origin.clone(), piece.title.clone(), piece.text.clone());
            let Some(chunk) = chunks.get(&key) else { continue };
            if !seen_docs.insert(chunk.doc_id.clone()) {
                continue;
            }
            match fetch_source(&store, chunk, piece.relevance, self.budgets.piece_cap_tokens, counter) {
                Ok(p) => out.push(p),
                Err(err) => warnings.push(err.to_string()),
            }
        }
        o.pass(
            self,
            "knowledge",
            json!({"hits": hits.items.len(), "reranked": n_candidates, "kept": out.len(), "warnings": warnings}),
        );
        out
    }

    fn paged(
        &self,
        query: &str,
        keywords: &[String],
        route: &retrieval::RepoRoute,
    ) -> Result<retrieval::Found<ContextPiece>> {
        let cached = self.paging_cache.lock().unwrap().get(&route.repo_name).cloned();
        let summaries = match cached {
            Some(s) => s,
            None => {
                let s = paging_summarize(&self.gateway, route, true)?;
                self.paging_cache.lock().unwrap().insert(route.repo_name.clone(), s.clone());
                s
            }
        };
        paging_query(&self.gateway, true, query, keywords, &summaries, route, self.gateway.counter())
    }

    /// Recalls a sent reply. Repeating the call on a withdrawn reply is a
    /// no-op; pending and withheld replies cannot be withdrawn.
    pub fn withdraw(&self, reply_id: &str) -> Result<ReplyRecord> {
        let mut transitioned = false;
        let now = self.clock.now();
        let record = self.book.update(reply_id, |r| match r.state {
            ReplyState::Sent => {
                r.state = ReplyState::Withdrawn;
                r.updated_at = now;
                r.trace.push("withdraw", GateOutcome::Pass, json!({}), now);
                transitioned = true;
                Ok(true)
            }
            ReplyState::Withdrawn => Ok(false),
            state @ (ReplyState::Pending | ReplyState::Withheld) => Err(Error::InvalidState {
                id: r.reply_id.clone(),
                state: state.to_string(),
                action: "withdraw",
            }),
        })?;
        if transitioned {
            let event = ImEvent {
                kind: ImEventType::Recall,
                group_id: record.group_id().to_owned(),
                reply_id: record.reply_id.clone(),
                text: String::new(),
            };
            if let Err(err) = self.im.deliver(&event) {
                tracing::warn!(%err, reply_id, "recall delivery failed");
            }
        }
        Ok(record)
    }
}

struct Outcome {
    trace: GateTrace,
    state: ReplyState,
    answer: Option<String>,
    citations: Vec<String>,
    reason: Option<String>,
}

impl Default for Outcome {
    fn default() -> Self {
        Outcome {
            trace: GateTrace::default(),
            state: ReplyState::Withheld,
            answer: None,
            citations: Vec::new(),
            reason: None,
        }
    }
}

impl Outcome {
    fn entry(&mut self, p: &Pipeline, gate: &str, outcome: GateOutcome, detail: serde_json::Value) {
        self.trace.push(gate, outcome, detail, p.clock.now());
    }

    fn pass(&mut self, p: &Pipeline, gate: &str, detail: serde_json::Value) {
        self.entry(p, gate, GateOutcome::Pass, detail);
    }

    fn fail(mut self, p: &Pipeline, gate: &str, detail: serde_json::Value, reason: &str) -> Self {
        self.entry(p, gate, GateOutcome::Fail, detail);
        self.state = ReplyState::Withheld;
        self.reason = Some(reason.to_owned());
        self
    }
}
