use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ContextPiece, Found, Source};
use crate::error::{Error, Result};
use crate::llm::{prompt, Gateway, TokenCounter};
use crate::moderation::Moderator;
use crate::util::char_prefix;

pub const DEFAULT_MAX_WEB_RESULTS: usize = 6;
pub const DEFAULT_FETCH_TIMEOUT: Duration = Duration::from_secs(10);
/// Characters of a page shown to the relevance scorer.
const SCORE_PREVIEW_CHARS: usize = 4000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHitRaw {
    pub url: String,
    #[serde(default)]
    pub snippet: String,
}

pub trait SearchClient: Send + Sync {
    fn search(&self, query: &str, max_results: usize) -> Result<Vec<SearchHitRaw>>;
}

pub trait PageFetcher: Send + Sync {
    fn fetch(&self, url: &str) -> Result<String>;
}

#[derive(Deserialize)]
struct SearchReply {
    results: Vec<SearchHitRaw>,
}

/// `GET <url>?q=<query>` → `{ results: [{url, snippet}] }`.
pub struct HttpSearchClient {
    url: String,
    agent: ureq::Agent,
}

impl HttpSearchClient {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        HttpSearchClient {
            url: url.into(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl SearchClient for HttpSearchClient {
    fn search(&self, query: &str, max_results: usize) -> Result<Vec<SearchHitRaw>> {
        let reply: SearchReply = self
            .agent
            .get(&self.url)
            .query("q", query)
            .call()
            .map_err(|e| Error::SearchUnavailable(e.to_string()))?
            .into_json()
            .map_err(|e| Error::SearchUnavailable(format!("bad reply body: {e}")))?;
        let mut results = reply.results;
        results.truncate(max_results);
        Ok(results)
    }
}

/// Plain GET returning the body as text.
pub struct HttpPageFetcher {
    agent: ureq::Agent,
}

impl HttpPageFetcher {
    pub fn new(timeout: Duration) -> Self {
        HttpPageFetcher {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl Default for HttpPageFetcher {
    fn default() -> Self {
        Self::new(DEFAULT_FETCH_TIMEOUT)
    }
}

impl PageFetcher for HttpPageFetcher {
    fn fetch(&self, url: &str) -> Result<String> {
        self.agent
            .get(url)
            .call()
            .map_err(|e| Error::SearchUnavailable(format!("fetch {url}: {e}")))?
            .into_string()
            .map_err(|e| Error::SearchUnavailable(format!("fetch {url}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebResult {
    pub url: String,
    pub snippet: String,
    pub fetched_text: String,
    pub safe: bool,
    pub relevance: u8,
}

impl WebResult {
    pub fn to_piece(&self, counter: &TokenCounter) -> ContextPiece {
        let text = if self.fetched_text.is_empty() { &self.snippet } else { &self.fetched_text };
        ContextPiece::new(Source::Web, self.url.clone(), text.clone(), self.relevance, self.url.clone(), counter)
    }
}

/// Optional web dependencies. Everything absent means no web evidence.
#[derive(Clone)]
pub struct WebSources {
    pub client: Option<Arc<dyn SearchClient>>,
    pub fetcher: Option<Arc<dyn PageFetcher>>,
    pub moderator: Option<Arc<dyn Moderator>>,
    pub max_results: usize,
}

impl Default for WebSources {
    fn default() -> Self {
        WebSources {
            client: None,
            fetcher: None,
            moderator: None,
            max_results: DEFAULT_MAX_WEB_RESULTS,
        }
    }
}

fn host(url: &str) -> &str {
    let rest = url.split_once("://").map_or(url, |(_, r)| r);
    let authority = rest.split(['/', '?', '#']).next().unwrap_or("");
    let authority = authority.rsplit_once('@').map_or(authority, |(_, h)| h);
    authority.split(':').next().unwrap_or("")
}

fn in_domains(url: &str, domains: &[String]) -> bool {
    let h = host(url).to_ascii_lowercase();
    domains.iter().any(|d| {
        let d = d.to_ascii_lowercase();
        h == d || h.ends_with(&format!(".{d}"))
    })
}

/// Searches, fetches, drops moderation-flagged pages, then keeps results
/// the scorer rates at least `theta` against `query`. Results on
/// `preferred_domains` are taken first when trimming to `max_results`.
pub fn web_search(
    sources: &WebSources,
    gateway: &Gateway,
    query: &str,
    keywords: &[String],
    preferred_domains: &[String],
    theta: u8,
) -> Found<WebResult> {
    let Some(client) = &sources.client else {
        return Found::default();
    };
    let q = if keywords.is_empty() { query.to_owned() } else { keywords.join(" ") };
    let mut hits = match client.search(&q, sources.max_results.max(1) * 2) {
        Ok(h) => h,
        Err(err) => {
            tracing::warn!(%err, "web search unavailable");
            return Found::warn(format!("web search skipped: {err}"));
        }
    };
    hits.sort_by_key(|h| !in_domains(&h.url, preferred_domains));
    hits.truncate(sources.max_results);

    let mut out = Found::default();
    for hit in hits {
        let fetched_text = match &sources.fetcher {
            Some(f) => f.fetch(&hit.url).unwrap_or_else(|err| {
                out.warnings.push(format!("fetch failed, using snippet: {err}"));
                String::new()
            }),
            None => String::new(),
        };
        let mut result = WebResult {
            url: hit.url,
            snippet: hit.snippet,
            fetched_text,
            safe: true,
            relevance: 0,
        };
        if let Some(m) = &sources.moderator {
            let verdict = m
                .flagged(&result.snippet)
                .and_then(|a| Ok(a || (!result.fetched_text.is_empty() && m.flagged(&result.fetched_text)?)));
            result.safe = matches!(verdict, Ok(false));
            if let Err(err) = verdict {
                out.warnings.push(format!("moderation failed for {}: {err}", result.url));
            }
        }
        if !result.safe {
            out.warnings.push(format!("unsafe web result dropped: {}", result.url));
            continue;
        }
        let body = if result.fetched_text.is_empty() { &result.snippet } else { &result.fetched_text };
        match gateway.score(prompt::DOC_RELEVANCE, &[query, char_prefix(body, SCORE_PREVIEW_CHARS)]) {
            Ok(s) if s.value >= theta => {
                result.relevance = s.value;
                out.items.push(result);
            }
            Ok(_) => {}
            Err(err) => out.warnings.push(format!("web result {} unscorable: {err}", result.url)),
        }
    }
    out
}
