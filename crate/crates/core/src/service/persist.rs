//! Reply persistence: an append-only JSONL trace log plus a JSON snapshot of
//! the latest record per reply, rewritten atomically on every change.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::response::{ReplyRecord, ReplySink};
use crate::util::write_atomic;

pub const TRACE_LOG: &str = "traces.jsonl";
pub const STATE_FILE: &str = "replies.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub timestamp: DateTime<Utc>,
    pub reply_id: String,
    pub record: ReplyRecord,
}

struct Inner {
    log: File,
    last: Option<DateTime<Utc>>,
    replies: BTreeMap<String, ReplyRecord>,
}

pub struct FileSink {
    dir: PathBuf,
    inner: Mutex<Inner>,
}

impl std::fmt::Debug for FileSink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FileSink").field("dir", &self.dir).finish_non_exhaustive()
    }
}

impl FileSink {
    /// Opens (creating if needed) the files under `dir` and loads the last
    /// snapshot.
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log_path = dir.join(TRACE_LOG);
        let last = last_timestamp(&log_path)?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let state_path = dir.join(STATE_FILE);
        let replies = match fs::read(&state_path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| Error::CorruptStore {
                path: state_path.clone(),
                reason: e.to_string(),
            })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(Error::io(&state_path, e)),
        };
        Ok(FileSink {
            dir: dir.to_owned(),
            inner: Mutex::new(Inner { log, last, replies }),
        })
    }

    /// Records from the latest snapshot, for [`crate::response::ReplyBook::restore`].
    pub fn snapshot(&self) -> Vec<ReplyRecord> {
        self.inner.lock().unwrap().replies.values().cloned().collect()
    }

    pub fn trace_log(&self) -> PathBuf {
        self.dir.join(TRACE_LOG)
    }

    pub fn read_log(&self) -> Result<Vec<LogLine>> {
        read_log(&self.trace_log())
    }
}

fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::CorruptStore {
            path: path.to_owned(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

fn last_timestamp(path: &Path) -> Result<Option<DateTime<Utc>>> {
    Ok(read_log(path)?.last().map(|l| l.timestamp))
}

impl ReplySink for FileSink {
    fn record(&self, reply: &ReplyRecord) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        // keep log timestamps monotone even if the wall clock steps back
        let timestamp = match inner.last {
            Some(last) if last > reply.updated_at => last,
            _ => reply.updated_at,
        };
        let line = serde_json::to_string(&LogLine {
            timestamp,
            reply_id: reply.reply_id.clone(),
            record: reply.clone(),
        })?;
        let log_path = self.dir.join(TRACE_LOG);
        writeln!(inner.log, "{line}")
            .and_then(|_| inner.log.flush())
            .map_err(|e| Error::io(&log_path, e))?;
        inner.last = Some(timestamp);
        inner.replies.insert(reply.reply_id.clone(), reply.clone());
        let state_path = self.dir.join(STATE_FILE);
        let replies = &inner.replies;
        write_atomic(&state_path, |w| {
            serde_json::to_writer(&mut *w, replies).map_err(std::io::Error::other)?;
            Ok(())
        })
    }
}
