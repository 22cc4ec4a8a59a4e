//! On-disk layout of a store root:
//!
//! * `vectors.hxdf`: magic `HXDF`, `u32` version, `u32` dimension, `u64`
//!   count, then `count * dimension` little-endian `f32`s.
//! * `chunks.jsonl`: one [`Chunk`] per line, same order as the vectors.
//! * `documents.jsonl`: one [`DocumentRecord`] per line.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{Chunk, DocumentRecord, FeatureStore};
use crate::error::{Error, Result};
use crate::util::{char_prefix, write_atomic};

pub const MAGIC: &[u8; 4] = b"HXDF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

const VECTORS: &str = "vectors.hxdf";
const CHUNKS: &str = "chunks.jsonl";
const DOCUMENTS: &str = "documents.jsonl";

pub(super) fn exists(root: &Path) -> bool {
    root.join(VECTORS).is_file()
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptStore {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes to a sibling temp file, then renames over the target.
pub(super) fn write_store(store: &FeatureStore, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let dim = store.dim();
    write_atomic(&root.join(VECTORS), |w| {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(dim as u32).to_le_bytes())?;
        w.write_all(&(store.chunks.len() as u64).to_le_bytes())?;
        for x in &store.vectors {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    })?;
    write_atomic(&root.join(CHUNKS), |w| {
        for c in &store.chunks {
            serde_json::to_writer(&mut *w, c)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    write_atomic(&root.join(DOCUMENTS), |w| {
        for d in store.docs.values() {
            serde_json::to_writer(&mut *w, d)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| corrupt(path, format!("line {}: {e}", n + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub(super) type StoreParts = (BTreeMap<String, DocumentRecord>, Vec<Chunk>, Vec<f32>);

pub(super) fn read_store(root: &Path, expected_dim: usize) -> Result<StoreParts> {
    let vpath = root.join(VECTORS);
    let bytes = fs::read(&vpath).map_err(|e| Error::io(&vpath, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(&vpath, "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt(&vpath, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(&vpath, format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let expected_len = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| corrupt(&vpath, "header overflows"))?;
    if bytes.len() != expected_len {
        return Err(corrupt(
            &vpath,
            format!("expected {expected_len} bytes, found {}", bytes.len()),
        ));
    }
    if dim != expected_dim {
        return Err(Error::DimensionMismatch {
            expected: expected_dim,
            actual: dim,
        });
    }
    let vectors: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();

    let cpath = root.join(CHUNKS);
    let chunks: Vec<Chunk> = read_jsonl(&cpath)?;
    if chunks.len() != count {
        return Err(corrupt(
            &cpath,
            format!("{} chunk records for {count} vectors", chunks.len()),
        ));
    }
    let dpath = root.join(DOCUMENTS);
    let docs: BTreeMap<String, DocumentRecord> = read_jsonl::<DocumentRecord>(&dpath)?
        .into_iter()
        .map(|d| (d.doc_id.clone(), d))
        .collect();
    for c in &chunks {
        let doc = docs
            .get(&c.doc_id)
            .ok_or_else(|| corrupt(&dpath, format!("chunk {} names unknown document", c.chunk_id)))?;
        let (start, end) = c.char_span;
        let body_ok = start <= end && {
            let tail: String = doc.full_text.chars().skip(start).collect();
            char_prefix(&tail, end - start) == c.body
        };
        if !body_ok {
            return Err(corrupt(&cpath, format!("chunk {} span disagrees with its body", c.chunk_id)));
        }
    }
    Ok((docs, chunks, vectors))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::store::{MockEmbedder, SplitMethod};

    fn sample() -> FeatureStore {
        let mut s = FeatureStore::new(Arc::new(MockEmbedder::new(32)), SplitMethod::default());
        s.add_document(DocumentRecord::new("a.md", "# Setup\npip install mmcv\n## GPU\nuse cuda 11", "text/markdown"))
            .unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample();
        s.persist(dir.path()).unwrap();
        let back = FeatureStore::load(dir.path(), Arc::new(MockEmbedder::new(32)), SplitMethod::default()).unwrap();
        assert_eq!(back.chunks(), s.chunks());
        assert_eq!(
            back.vectors.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            s.vectors.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.docs, s.docs);
    }

    #[test]
    fn empty_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = FeatureStore::new(Arc::new(MockEmbedder::new(8)), SplitMethod::Markdown);
        s.persist(dir.path()).unwrap();
        let back = FeatureStore::load(dir.path(), Arc::new(MockEmbedder::new(8)), SplitMethod::Markdown).unwrap();
        assert!(back.is_empty());
        assert_eq!(fs::metadata(dir.path().join(VECTORS)).unwrap().len(), HEADER_LEN as u64);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        sample().persist(dir.path()).unwrap();
        let path = dir.path().join(VECTORS);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = FeatureStore::load(dir.path(), Arc::new(MockEmbedder::new(32)), SplitMethod::default()).unwrap_err();
        assert!(matches!(err, Error::CorruptStore { .. }));
        fs::write(&path, &bytes[..7]).unwrap();
        assert!(matches!(
            FeatureStore::load(dir.path(), Arc::new(MockEmbedder::new(32)), SplitMethod::default()),
            Err(Error::CorruptStore { .. })
        ));
    }

    #[test]
    fn bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        sample().persist(dir.path()).unwrap();
        let path = dir.path().join(VECTORS);
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        let load = || FeatureStore::load(dir.path(), Arc::new(MockEmbedder::new(32)), SplitMethod::default());
        assert!(matches!(load(), Err(Error::CorruptStore { .. })));
        bytes[0] = b'H';
        bytes[4] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(), Err(Error::CorruptStore { .. })));
    }

    #[test]
    fn dimension_must_match_embedder() {
        let dir = tempfile::tempdir().unwrap();
        sample().persist(dir.path()).unwrap();
        let err = FeatureStore::load(dir.path(), Arc::new(MockEmbedder::new(16)), SplitMethod::default()).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 16, actual: 32 }));
    }

    #[test]
    fn metadata_mismatch_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        sample().persist(dir.path()).unwrap();
        fs::write(dir.path().join(CHUNKS), "").unwrap();
        assert!(matches!(
            FeatureStore::load(dir.path(), Arc::new(MockEmbedder::new(32)), SplitMethod::default()),
            Err(Error::CorruptStore { .. })
        ));
    }
}
