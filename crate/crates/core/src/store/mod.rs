//! Chunked, embedded knowledge with exact cosine search.
//!
//! Two independent instances back the engine: the rejection store decides
//! whether a message is on-topic at all, the response store supplies
//! evidence for answers. They never share files or vectors.

mod embed;
mod persist;
mod split;

pub use embed::{mock_tokens, Embedder, Embedding, HttpEmbedder, MockEmbedder, DEFAULT_DIM};
pub use split::{split_chars, split_hybrid, split_markdown, SplitMethod, DEFAULT_MAX_CHARS, DEFAULT_OVERLAP};

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::sha256_hex;

pub fn doc_id_for(full_text: &str) -> String {
    sha256_hex(full_text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub source_path: String,
    pub full_text: String,
    pub mime: String,
}

impl DocumentRecord {
    pub fn new(source_path: impl Into<String>, full_text: impl Into<String>, mime: impl Into<String>) -> Self {
        let full_text = full_text.into();
        DocumentRecord {
            doc_id: doc_id_for(&full_text),
            source_path: source_path.into(),
            full_text,
            mime: mime.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub header_path: Vec<String>,
    pub body: String,
    /// `[start, end)` in characters of the document's full text.
    pub char_span: (usize, usize),
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub chunk_id: String,
    pub similarity: f32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestSummary {
    pub files_seen: usize,
    pub documents_added: usize,
    pub chunks_added: usize,
    pub skipped: Vec<SkippedFile>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// Which of the two stores an instance is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreRole {
    Rejection,
    Response,
}

impl fmt::Display for StoreRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StoreRole::Rejection => "rejection",
            StoreRole::Response => "response",
        })
    }
}

/// Exact brute-force index. Readers may share `&FeatureStore`; mutation
/// needs `&mut`, so wrap in a `RwLock` for concurrent use.
pub struct FeatureStore {
    embedder: Arc<dyn Embedder>,
    splitter: SplitMethod,
    docs: BTreeMap<String, DocumentRecord>,
    chunks: Vec<Chunk>,
    /// Row-major, `chunks.len() * dim`.
    vectors: Vec<f32>,
    by_id: HashMap<String, usize>,
}

impl fmt::Debug for FeatureStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureStore")
            .field("dim", &self.dim())
            .field("splitter", &self.splitter)
            .field("documents", &self.docs.len())
            .field("chunks", &self.chunks.len())
            .finish()
    }
}

const EMBED_BATCH: usize = 32;

impl FeatureStore {
    pub fn new(embedder: Arc<dyn Embedder>, splitter: SplitMethod) -> Self {
        FeatureStore {
            embedder,
            splitter,
            docs: BTreeMap::new(),
            chunks: Vec::new(),
            vectors: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.embedder.dim()
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn splitter(&self) -> SplitMethod {
        self.splitter
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn document_count(&self) -> usize {
        self.docs.len()
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn chunk(&self, chunk_id: &str) -> Option<&Chunk> {
        self.by_id.get(chunk_id).map(|&i| &self.chunks[i])
    }

    pub fn document(&self, doc_id: &str) -> Option<&DocumentRecord> {
        self.docs.get(doc_id)
    }

    pub fn documents(&self) -> impl Iterator<Item = &DocumentRecord> {
        self.docs.values()
    }

    pub fn vector(&self, chunk_id: &str) -> Option<&[f32]> {
        let d = self.dim();
        self.by_id.get(chunk_id).map(|&i| &self.vectors[i * d..(i + 1) * d])
    }

    /// Splits, embeds and indexes a document. Returns the number of chunks
    /// added; a document already present (same text) adds zero.
    pub fn add_document(&mut self, record: DocumentRecord) -> Result<usize> {
        if record.doc_id != doc_id_for(&record.full_text) {
            return Err(Error::InvalidInput(format!(
                "doc_id {} does not match the text hash",
                record.doc_id
            )));
        }
        if self.docs.contains_key(&record.doc_id) {
            return Ok(0);
        }
        let chunks = self.splitter.split(&record.full_text)?;
        let mut vectors = Vec::with_capacity(chunks.len() * self.dim());
        for batch in chunks.chunks(EMBED_BATCH) {
            let texts: Vec<&str> = batch.iter().map(|c| c.body.as_str()).collect();
            let embedded = self.embedder.embed_batch(&texts)?;
            if embedded.len() != batch.len() {
                return Err(Error::EmbeddingUnavailable("short batch from embedder".into()));
            }
            for e in embedded {
                self.check_dim(e.dim())?;
                vectors.extend_from_slice(e.as_slice());
            }
        }
        let added = chunks.len();
        self.insert_unchecked(record, chunks, vectors);
        Ok(added)
    }

    fn insert_unchecked(&mut self, record: DocumentRecord, chunks: Vec<Chunk>, vectors: Vec<f32>) {
        for c in chunks {
            self.by_id.insert(c.chunk_id.clone(), self.chunks.len());
            self.chunks.push(c);
        }
        self.vectors.extend(vectors);
        self.docs.insert(record.doc_id.clone(), record);
    }

    /// Adds every `.md`, `.markdown` and `.txt` file under `dir`, in path
    /// order. Unreadable files are skipped and reported.
    pub fn ingest(&mut self, dir: &Path) -> Result<IngestSummary> {
        let mut summary = IngestSummary::default();
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
            ));
        }
        let walker = walkdir::WalkDir::new(dir).sort_by_file_name();
        for entry in walker {
            let entry = match entry {
                Ok(e) => e,
                Err(err) => {
                    summary.skipped.push(SkippedFile {
                        path: err.path().map(Path::to_path_buf).unwrap_or_default(),
                        reason: err.to_string(),
                    });
                    continue;
                }
            };
            let path = entry.path();
            if !entry.file_type().is_file() {
                continue;
            }
            let mime = match path.extension().and_then(|e| e.to_str()) {
                Some("md" | "markdown") => "text/markdown",
                Some("txt") => "text/plain",
                _ => continue,
            };
            summary.files_seen += 1;
            let text = match std::fs::read(path).map(String::from_utf8) {
                Ok(Ok(text)) => text,
                Ok(Err(_)) => {
                    tracing::warn!(path = %path.display(), "skipping non-UTF-8 file");
                    summary.skipped.push(SkippedFile {
                        path: path.to_path_buf(),
                        reason: "not valid UTF-8".into(),
                    });
                    continue;
                }
                Err(err) => {
                    tracing::warn!(path = %path.display(), %err, "skipping unreadable file");
                    summary.skipped.push(SkippedFile {
                        path: path.to_path_buf(),
                        reason: err.to_string(),
                    });
                    continue;
                }
            };
            let rel = path.strip_prefix(dir).unwrap_or(path).to_string_lossy().replace('\\', "/");
            let record = DocumentRecord::new(rel, text, mime);
            let is_new = !self.docs.contains_key(&record.doc_id);
            let added = self.add_document(record)?;
            if is_new {
                summary.documents_added += 1;
            }
            summary.chunks_added += added;
        }
        Ok(summary)
    }

    fn check_dim(&self, actual: usize) -> Result<()> {
        if actual != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual,
            });
        }
        Ok(())
    }

    /// Exact top-`k` by cosine similarity; ties go to the smaller chunk id.
    pub fn search(&self, query: &Embedding, k: usize) -> Result<Vec<SearchHit>> {
        if k == 0 {
            return Err(Error::InvalidInput("k must be at least 1".into()));
        }
        self.check_dim(query.dim())?;
        let d = self.dim();
        let q = query.as_slice();
        let mut scored: Vec<(f64, usize)> = self
            .vectors
            .chunks_exact(d)
            .enumerate()
            .map(|(i, row)| (embed::dot(row, q), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            b.0.total_cmp(&a.0)
                .then_with(|| self.chunks[a.1].chunk_id.cmp(&self.chunks[b.1].chunk_id))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(s, i)| SearchHit {
                chunk_id: self.chunks[i].chunk_id.clone(),
                similarity: s.clamp(-1.0, 1.0) as f32,
            })
            .collect())
    }

    pub fn search_text(&self, query: &str, k: usize) -> Result<Vec<SearchHit>> {
        let q = self.embedder.embed(query)?;
        self.search(&q, k)
    }

    pub fn persist(&self, root: &Path) -> Result<()> {
        persist::write_store(self, root)
    }

    pub fn load(root: &Path, embedder: Arc<dyn Embedder>, splitter: SplitMethod) -> Result<Self> {
        let (docs, chunks, vectors) = persist::read_store(root, embedder.dim())?;
        let mut store = FeatureStore::new(embedder, splitter);
        store.vectors = vectors;
        for (i, c) in chunks.iter().enumerate() {
            store.by_id.insert(c.chunk_id.clone(), i);
        }
        store.chunks = chunks;
        store.docs = docs;
        Ok(store)
    }

    /// Loads `root` if it holds a store, otherwise starts empty.
    pub fn open_or_create(root: &Path, embedder: Arc<dyn Embedder>, splitter: SplitMethod) -> Result<Self> {
        if persist::exists(root) {
            Self::load(root, embedder, splitter)
        } else {
            Ok(Self::new(embedder, splitter))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> FeatureStore {
        FeatureStore::new(Arc::new(MockEmbedder::new(64)), SplitMethod::default())
    }

    /// Embedder that maps each text to a fixed vector; for geometry tests.
    struct Fixed(Vec<(&'static str, Vec<f32>)>);

    impl Embedder for Fixed {
        fn dim(&self) -> usize {
            self.0[0].1.len()
        }
        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
            texts
                .iter()
                .map(|t| {
                    let v = self.0.iter().find(|(k, _)| k == t).map(|(_, v)| v.clone());
                    Embedding::normalize(v.ok_or_else(|| Error::EmbeddingUnavailable((*t).into()))?)
                })
                .collect()
        }
    }

    #[test]
    fn identical_vector_ranks_first() {
        let mut s = store();
        s.add_document(DocumentRecord::new("a.md", "mmdeploy installation guide", "text/markdown")).unwrap();
        s.add_document(DocumentRecord::new("b.md", "lunch plans tomorrow", "text/markdown")).unwrap();
        let q = s.embedder().embed("mmdeploy installation guide").unwrap();
        let hits = s.search(&q, 5).unwrap();
        assert_eq!(hits.len(), 2);
        assert!((hits[0].similarity - 1.0).abs() < 1e-6);
        assert_eq!(s.chunk(&hits[0].chunk_id).unwrap().body, "mmdeploy installation guide");
    }

    #[test]
    fn orthogonal_vectors_score_zero() {
        let emb = Fixed(vec![("x", vec![1.0, 0.0]), ("y", vec![0.0, 1.0])]);
        let mut s = FeatureStore::new(Arc::new(emb), SplitMethod::Markdown);
        s.add_document(DocumentRecord::new("x", "x", "text/plain")).unwrap();
        let hits = s.search_text("y", 1).unwrap();
        assert!(hits[0].similarity.abs() < 1e-6);
    }

    #[test]
    fn empty_store_and_bad_queries() {
        let s = store();
        let q = s.embedder().embed("anything").unwrap();
        assert!(s.search(&q, 3).unwrap().is_empty());
        assert!(s.search(&q, 0).is_err());
        let wrong = Embedding::normalize(vec![1.0; 8]).unwrap();
        assert!(matches!(s.search(&wrong, 1), Err(Error::DimensionMismatch { expected: 64, actual: 8 })));
    }

    #[test]
    fn ties_break_by_chunk_id() {
        let emb = Fixed(vec![("p", vec![1.0, 0.0]), ("q", vec![1.0, 0.0]), ("r", vec![0.0, 1.0])]);
        let mut s = FeatureStore::new(Arc::new(emb), SplitMethod::Markdown);
        s.add_document(DocumentRecord::new("p", "p", "text/plain")).unwrap();
        s.add_document(DocumentRecord::new("q", "q", "text/plain")).unwrap();
        let hits = s.search(&Embedding::normalize(vec![1.0, 0.0]).unwrap(), 2).unwrap();
        assert!(hits[0].chunk_id < hits[1].chunk_id);
        assert_eq!(hits[0].similarity, hits[1].similarity);
    }

    #[test]
    fn duplicate_documents_add_nothing() {
        let mut s = store();
        let rec = DocumentRecord::new("a.md", "# Title\nbody text here", "text/markdown");
        assert_eq!(s.add_document(rec.clone()).unwrap(), 1);
        assert_eq!(s.add_document(rec).unwrap(), 0);
        assert_eq!(s.len(), 1);
        let mut forged = DocumentRecord::new("a.md", "text", "text/plain");
        forged.doc_id = "nope".into();
        assert!(s.add_document(forged).is_err());
    }

    #[test]
    fn embedding_failure_leaves_store_untouched() {
        let emb = Fixed(vec![("known", vec![1.0, 0.0])]);
        let mut s = FeatureStore::new(Arc::new(emb), SplitMethod::Markdown);
        let rec = DocumentRecord::new("u", "unknown", "text/plain");
        assert!(matches!(s.add_document(rec), Err(Error::EmbeddingUnavailable(_))));
        assert!(s.is_empty());
        assert_eq!(s.document_count(), 0);
    }

    #[test]
    fn stored_embeddings_are_unit() {
        let mut s = store();
        s.add_document(DocumentRecord::new("a", "# A\none two three\n# B\nfour five", "text/markdown"))
            .unwrap();
        for c in s.chunks() {
            let v = s.vector(&c.chunk_id).unwrap();
            let n = embed::dot(v, v).sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }
}
