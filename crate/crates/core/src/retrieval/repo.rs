use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::{clean_phrase, ContextPiece, Found, Source};
use crate::error::{Error, Result};
use crate::llm::{prompt, Capability, Gateway, TokenCounter};

pub const DEFAULT_MAX_REPO_FILES: usize = 5;
const MAX_FILE_BYTES: u64 = 1 << 20;
const CONTEXT_LINES: usize = 2;
const SOURCE_EXTS: &[&str] = &["py", "rs", "c", "cc", "cpp", "h", "hpp", "cu", "js", "ts", "go", "java"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoRoute {
    pub repo_name: String,
    pub search_root: PathBuf,
    #[serde(default)]
    pub doc_domains: Vec<String>,
}

/// group id → route. A map, so each group has at most one repository.
pub type RepoRoutes = BTreeMap<String, RepoRoute>;

pub fn route_repo<'a>(routes: &'a RepoRoutes, group_id: &str) -> Option<&'a RepoRoute> {
    routes.get(group_id)
}

/// Lowercased words of an identifier: `TextSummarizer`, `text_summarizer`
/// and `text-summarizer` all give `[text, summarizer]`.
fn ident_words(ident: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    let mut prev_lower = false;
    for c in ident.chars() {
        if !c.is_alphanumeric() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            prev_lower = false;
            continue;
        }
        if c.is_uppercase() && prev_lower && !cur.is_empty() {
            words.push(std::mem::take(&mut cur));
        }
        prev_lower = c.is_lowercase() || c.is_ascii_digit();
        cur.extend(c.to_lowercase());
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

fn identifiers(line: &str) -> impl Iterator<Item = &str> {
    line.split(|c: char| !(c.is_alphanumeric() || c == '_')).filter(|s| !s.is_empty())
}

struct Term {
    literal: String,
    words: Vec<String>,
}

impl Term {
    fn new(phrase: &str) -> Self {
        Term {
            literal: phrase.trim().to_lowercase(),
            words: ident_words(phrase),
        }
    }

    fn matches(&self, line: &str) -> bool {
        if self.literal.is_empty() {
            return false;
        }
        if line.to_lowercase().contains(&self.literal) {
            return true;
        }
        !self.words.is_empty()
            && identifiers(line).any(|id| {
                let w = ident_words(id);
                w.windows(self.words.len()).any(|win| win == self.words.as_slice())
            })
    }
}

fn rel_path(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Readable text files under `root`, sorted, skipping hidden entries.
fn text_files(root: &Path) -> Result<Vec<(String, String)>> {
    std::fs::read_dir(root).map_err(|e| Error::RepoUnavailable {
        path: root.to_owned(),
        reason: e.to_string(),
    })?;
    let mut out = Vec::new();
    let walker = WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| e.depth() == 0 || !e.file_name().to_string_lossy().starts_with('.'));
    for entry in walker.filter_map(|e| e.ok()) {
        if !entry.file_type().is_file() || entry.metadata().map_or(true, |m| m.len() > MAX_FILE_BYTES) {
            continue;
        }
        if let Ok(text) = std::fs::read_to_string(entry.path()) {
            out.push((rel_path(root, entry.path()), text));
        }
    }
    Ok(out)
}

/// Literal and identifier-aware search of the route's checkout. Each file
/// with matches becomes one piece holding the matching lines with a little
/// surrounding context; relevance is the share of phrases the file matched.
pub fn repo_search(
    route: &RepoRoute,
    keywords: &[String],
    max_files: usize,
    counter: &TokenCounter,
) -> Result<Vec<ContextPiece>> {
    let files = text_files(&route.search_root)?;
    let terms: Vec<Term> = keywords.iter().map(|k| Term::new(k)).filter(|t| !t.literal.is_empty()).collect();
    if terms.is_empty() {
        return Ok(Vec::new());
    }
    let mut scored = Vec::new();
    for (path, text) in files {
        let lines: Vec<&str> = text.lines().collect();
        let mut hit_lines = BTreeSet::new();
        let mut hit_terms = BTreeSet::new();
        for (i, line) in lines.iter().enumerate() {
            for (t, term) in terms.iter().enumerate() {
                if term.matches(line) {
                    hit_lines.insert(i);
                    hit_terms.insert(t);
                }
            }
        }
        if hit_lines.is_empty() {
            continue;
        }
        let mut shown = BTreeSet::new();
        for &i in &hit_lines {
            shown.extend(i.saturating_sub(CONTEXT_LINES)..(i + CONTEXT_LINES + 1).min(lines.len()));
        }
        let mut body = String::new();
        let mut prev: Option<usize> = None;
        for &i in &shown {
            if prev.is_some_and(|p| p + 1 != i) {
                body.push_str("...\n");
            }
            body.push_str(&format!("{}: {}\n", i + 1, lines[i]));
            prev = Some(i);
        }
        let relevance = ((10 * hit_terms.len()).div_ceil(terms.len())).clamp(1, 10) as u8;
        let origin = format!("{}/{}", route.repo_name, path);
        scored.push((hit_lines.len(), ContextPiece::new(Source::Repo, path, body, relevance, origin, counter)));
    }
    scored.sort_by(|(ha, a), (hb, b)| {
        b.relevance
            .cmp(&a.relevance)
            .then_with(|| hb.cmp(ha))
            .then_with(|| a.origin.cmp(&b.origin))
    });
    Ok(scored.into_iter().take(max_files).map(|(_, p)| p).collect())
}

fn source_modules(route: &RepoRoute) -> Result<Vec<(String, String)>> {
    Ok(text_files(&route.search_root)?
        .into_iter()
        .filter(|(p, _)| {
            Path::new(p)
                .extension()
                .is_some_and(|e| SOURCE_EXTS.contains(&e.to_string_lossy().as_ref()))
        })
        .collect())
}

/// One-line description of every source module in the repository.
pub fn paging_summarize(gateway: &Gateway, route: &RepoRoute, enabled: bool) -> Result<BTreeMap<String, String>> {
    if !enabled {
        return Err(Error::PagingDisabled);
    }
    let mut out = BTreeMap::new();
    for (name, source) in source_modules(route)? {
        let reply = gateway.complete(prompt::PAGING_SUMMARY, &[&name, &source], Capability::Generation)?;
        out.insert(name, reply.text.split_whitespace().collect::<Vec<_>>().join(" "));
    }
    Ok(out)
}

/// Asks the model which modules to open, then returns their full source.
/// An empty or unknown selection falls back to [`repo_search`].
#[allow(clippy::too_many_arguments)]
pub fn paging_query(
    gateway: &Gateway,
    enabled: bool,
    query: &str,
    keywords: &[String],
    summaries: &BTreeMap<String, String>,
    route: &RepoRoute,
    counter: &TokenCounter,
) -> Result<Found<ContextPiece>> {
    if !enabled {
        return Err(Error::PagingDisabled);
    }
    let listing: String = summaries.iter().map(|(m, d)| format!("{m}: {d}\n")).collect();
    let fallback = |why: String| -> Result<Found<ContextPiece>> {
        tracing::debug!(%why, "paging fell back to repo search");
        Ok(Found {
            items: repo_search(route, keywords, DEFAULT_MAX_REPO_FILES, counter)?,
            warnings: vec![format!("paging fell back to repo search: {why}")],
        })
    };
    let reply = match gateway.complete(prompt::PAGING_SELECT, &[query, &listing], Capability::Generation) {
        Ok(c) => c.text,
        Err(err) => return fallback(err.to_string()),
    };
    let picked: Vec<String> = reply.lines().map(clean_phrase).filter(|l| !l.is_empty()).collect();
    if picked.is_empty() {
        return fallback("no module selected".into());
    }
    if let Some(unknown) = picked.iter().find(|m| !summaries.contains_key(m.as_str())) {
        return fallback(format!("unknown module {unknown:?}"));
    }
    let modules: BTreeMap<String, String> = source_modules(route)?.into_iter().collect();
    let mut pieces = Vec::new();
    for name in picked.iter().collect::<BTreeSet<_>>() {
        let Some(source) = modules.get(name) else {
            return fallback(format!("module {name:?} vanished"));
        };
        let origin = format!("{}/{}", route.repo_name, name);
        pieces.push(ContextPiece::new(Source::Repo, name.clone(), source.clone(), 10, origin, counter));
    }
    Ok(Found::ok(pieces))
}
