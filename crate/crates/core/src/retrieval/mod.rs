//! Background-context construction: keyword extraction, knowledge search
//! with LLM rerank, full-document expansion, web and repository sources,
//! and budgeted assembly.

mod assemble;
mod repo;
mod web;

pub use assemble::{assemble_context, ContextBundle, DEFAULT_BUDGET_TOKENS, DEFAULT_RESERVE_TOKENS, LONG_CONTEXT_BUDGET_TOKENS};
pub use repo::{DEFAULT_MAX_REPO_FILES, paging_query, paging_summarize, repo_search, route_repo, RepoRoute, RepoRoutes};
pub use web::{DEFAULT_FETCH_TIMEOUT, DEFAULT_MAX_WEB_RESULTS, web_search, HttpPageFetcher, HttpSearchClient, PageFetcher, SearchClient, SearchHitRaw, WebResult, WebSources};

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{prompt, Capability, Gateway, TokenCounter};
use crate::store::{Chunk, FeatureStore};
use crate::util::char_prefix;

pub const DEFAULT_RELEVANCE_THRESHOLD: u8 = 5;
pub const DEFAULT_MAX_RERANK: usize = 12;
pub const DEFAULT_PIECE_CAP_TOKENS: usize = 8000;
pub const TRUNCATED_MARK: &str = " [truncated]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Knowledge,
    Repo,
    Web,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextPiece {
    pub source: Source,
    pub title: String,
    pub text: String,
    pub tokens: usize,
    pub relevance: u8,
    /// Citation: a path or URL.
    pub origin: String,
}

impl ContextPiece {
    pub fn new(
        source: Source,
        title: impl Into<String>,
        text: impl Into<String>,
        relevance: u8,
        origin: impl Into<String>,
        counter: &TokenCounter,
    ) -> Self {
        let text = text.into();
        ContextPiece {
            source,
            title: title.into(),
            tokens: counter.count(&text),
            text,
            relevance: relevance.min(10),
            origin: origin.into(),
        }
    }

    /// Cuts the text to `max_tokens`, marking the title. No-op if it fits.
    pub fn truncate_to(&mut self, max_tokens: usize, counter: &TokenCounter) {
        if self.tokens <= max_tokens {
            return;
        }
        self.text = char_prefix(&self.text, counter.chars_for(max_tokens)).to_owned();
        self.tokens = counter.count(&self.text);
        if !self.title.ends_with(TRUNCATED_MARK) {
            self.title.push_str(TRUNCATED_MARK);
        }
    }
}

/// Items plus the non-fatal problems hit while producing them.
#[derive(Debug, Clone, PartialEq)]
pub struct Found<T> {
    pub items: Vec<T>,
    pub warnings: Vec<String>,
}

impl<T> Default for Found<T> {
    fn default() -> Self {
        Found {
            items: Vec::new(),
            warnings: Vec::new(),
        }
    }
}

impl<T> Found<T> {
    pub fn ok(items: Vec<T>) -> Self {
        Found {
            items,
            warnings: Vec::new(),
        }
    }

    pub fn warn(warning: impl Into<String>) -> Self {
        Found {
            items: Vec::new(),
            warnings: vec![warning.into()],
        }
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "any", "are", "be", "but", "can", "could", "do", "does", "excuse", "for", "help", "hello",
    "hi", "how", "i", "in", "is", "it", "me", "might", "must", "my", "of", "on", "or", "please", "shall",
    "should", "so", "some", "the", "there", "this", "to", "what", "when", "where", "which", "who", "why",
    "will", "with", "would", "you", "your", "吗", "呢", "吧", "啊", "呀", "请问", "怎么", "如何", "什么",
    "为什么", "的", "了",
];

/// Whitespace tokens, lowercased and stripped of surrounding punctuation,
/// minus stopwords. Order is kept and duplicates dropped.
pub fn fallback_keywords(query: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    query
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric() && c != '_' && c != '-').to_lowercase())
        .filter(|t| !t.is_empty() && !STOPWORDS.contains(&t.as_str()))
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

fn clean_phrase(line: &str) -> String {
    let t = line.trim();
    let t = t.trim_start_matches(['-', '*', '•']).trim_start();
    let t = match t.split_once(['.', ')']) {
        Some((n, rest))
            if !n.is_empty() && n.chars().all(|c| c.is_ascii_digit()) && rest.starts_with(char::is_whitespace) =>
        {
            rest.trim_start()
        }
        _ => t,
    };
    t.trim_matches(|c: char| c == '"' || c == '\'' || c == '`' || c.is_whitespace())
        .to_owned()
}

/// Content phrases for search. Falls back to [`fallback_keywords`] when the
/// gateway fails or returns nothing usable.
pub fn extract_keywords(gateway: &Gateway, query: &str) -> Result<Found<String>> {
    if query.trim().is_empty() {
        return Err(Error::InvalidInput("query is empty".into()));
    }
    let reply = match gateway.complete(prompt::EXTRACT_KEYWORDS, &[query], Capability::Generation) {
        Ok(c) => c.text,
        Err(err) => {
            tracing::warn!(%err, "keyword extraction failed; using stopword fallback");
            return Ok(Found {
                items: fallback_keywords(query),
                warnings: vec![format!("keyword extraction fell back: {err}")],
            });
        }
    };
    let mut seen = HashSet::new();
    let phrases: Vec<String> = reply
        .lines()
        .map(clean_phrase)
        .filter(|p| !p.is_empty() && seen.insert(p.to_lowercase()))
        .collect();
    if phrases.is_empty() {
        return Ok(Found {
            items: fallback_keywords(query),
            warnings: vec!["keyword extraction returned nothing; used stopword fallback".into()],
        });
    }
    Ok(Found::ok(phrases))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeHit {
    pub chunk: Chunk,
    pub similarity: f32,
}

/// Top-`k` hits per phrase, unioned and deduplicated by chunk id keeping the
/// best similarity. Sorted by similarity descending, then chunk id.
pub fn knowledge_search(store: &FeatureStore, keywords: &[String], k: usize) -> Found<KnowledgeHit> {
    if store.is_empty() || keywords.is_empty() || k == 0 {
        return Found::default();
    }
    let mut best: BTreeMap<String, f32> = BTreeMap::new();
    let mut warnings = Vec::new();
    for phrase in keywords {
        match store.search_text(phrase, k) {
            Ok(hits) => {
                for h in hits {
                    let e = best.entry(h.chunk_id).or_insert(f32::NEG_INFINITY);
                    *e = e.max(h.similarity);
                }
            }
            Err(err) => {
                tracing::warn!(%err, phrase, "knowledge search failed");
                warnings.push(format!("knowledge search for {phrase:?} failed: {err}"));
            }
        }
    }
    let mut items: Vec<KnowledgeHit> = best
        .into_iter()
        .filter_map(|(id, similarity)| {
            store.chunk(&id).map(|c| KnowledgeHit {
                chunk: c.clone(),
                similarity,
            })
        })
        .collect();
    items.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.chunk.chunk_id.cmp(&b.chunk.chunk_id))
    });
    Found { items, warnings }
}

/// Scores each candidate against `query` with the document-relevance
/// template and keeps those at or above `theta`, best first. Unscorable
/// candidates are dropped.
pub fn rerank_by_llm(
    gateway: &Gateway,
    query: &str,
    candidates: Vec<ContextPiece>,
    theta: u8,
    max_rerank: usize,
) -> Result<Found<ContextPiece>> {
    if candidates.len() > max_rerank {
        return Err(Error::InvalidInput(format!(
            "{} rerank candidates exceed the limit of {max_rerank}",
            candidates.len()
        )));
    }
    let mut kept = Vec::new();
    let mut warnings = Vec::new();
    for mut piece in candidates {
        match gateway.score(prompt::DOC_RELEVANCE, &[query, &piece.text]) {
            Ok(s) if s.value >= theta => {
                piece.relevance = s.value;
                kept.push(piece);
            }
            Ok(_) => {}
            Err(err) => warnings.push(format!("rerank dropped {}: {err}", piece.origin)),
        }
    }
    // stable: equal scores keep candidate order
    kept.sort_by(|a, b| b.relevance.cmp(&a.relevance));
    Ok(Found { items: kept, warnings })
}

/// Candidate piece holding just the chunk body, for reranking.
pub fn chunk_piece(store: &FeatureStore, chunk: &Chunk, counter: &TokenCounter) -> ContextPiece {
    let origin = store
        .document(&chunk.doc_id)
        .map_or_else(|| chunk.doc_id.clone(), |d| d.source_path.clone());
    let title = if chunk.header_path.is_empty() {
        origin.clone()
    } else {
        chunk.header_path.join(" > ")
    };
    ContextPiece::new(Source::Knowledge, title, chunk.body.clone(), 0, origin, counter)
}

/// The whole document behind `chunk`, capped at `cap_tokens`.
pub fn fetch_source(
    store: &FeatureStore,
    chunk: &Chunk,
    relevance: u8,
    cap_tokens: usize,
    counter: &TokenCounter,
) -> Result<ContextPiece> {
    let doc = store
        .document(&chunk.doc_id)
        .ok_or_else(|| Error::SourceMissing(chunk.doc_id.clone()))?;
    let mut piece = ContextPiece::new(
        Source::Knowledge,
        doc.source_path.clone(),
        doc.full_text.clone(),
        relevance,
        doc.source_path.clone(),
        counter,
    );
    piece.truncate_to(cap_tokens, counter);
    Ok(piece)
}
