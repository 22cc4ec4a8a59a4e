use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::error::{Error, Result};
use crate::preprocess::UserKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateOutcome {
    Pass,
    Fail,
    /// The step did not apply, e.g. no repository routed for the group.
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateEntry {
    pub gate: String,
    pub outcome: GateOutcome,
    pub detail: serde_json::Value,
    pub timestamp: DateTime<Utc>,
}

/// Steps in execution order. A failing step is always the last one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GateTrace(pub Vec<GateEntry>);

impl GateTrace {
    pub fn push(&mut self, gate: &str, outcome: GateOutcome, detail: serde_json::Value, timestamp: DateTime<Utc>) {
        debug_assert!(!self.failed(), "entry after a failed gate");
        self.0.push(GateEntry {
            gate: gate.to_owned(),
            outcome,
            detail,
            timestamp,
        });
    }

    pub fn entries(&self) -> &[GateEntry] {
        &self.0
    }

    pub fn last(&self) -> Option<&GateEntry> {
        self.0.last()
    }

    pub fn failed(&self) -> bool {
        self.0.iter().any(|e| e.outcome == GateOutcome::Fail)
    }

    pub fn gate(&self, name: &str) -> Option<&GateEntry> {
        self.0.iter().find(|e| e.gate == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplyState {
    Pending,
    Sent,
    Withheld,
    Withdrawn,
}

impl ReplyState {
    pub fn as_str(self) -> &'static str {
        match self {
            ReplyState::Pending => "pending",
            ReplyState::Sent => "sent",
            ReplyState::Withheld => "withheld",
            ReplyState::Withdrawn => "withdrawn",
        }
    }
}

impl fmt::Display for ReplyState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ReplyState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pending" => Ok(ReplyState::Pending),
            "sent" => Ok(ReplyState::Sent),
            "withheld" => Ok(ReplyState::Withheld),
            "withdrawn" => Ok(ReplyState::Withdrawn),
            other => Err(Error::InvalidInput(format!("unknown reply state {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplyRecord {
    pub reply_id: String,
    pub user_key: UserKey,
    pub query_text: String,
    pub answer: Option<String>,
    pub citations: Vec<String>,
    pub trace: GateTrace,
    pub state: ReplyState,
    /// Why the reply was withheld, e.g. `out_of_hours` or `rejected`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl ReplyRecord {
    pub fn group_id(&self) -> &str {
        self.user_key.group_id()
    }
}

/// Persistence hook called before every change becomes visible.
pub trait ReplySink: Send + Sync {
    fn record(&self, reply: &ReplyRecord) -> Result<()>;
}

/// Current reply states plus a change feed.
pub struct ReplyBook {
    replies: Mutex<BTreeMap<String, ReplyRecord>>,
    sink: Option<Arc<dyn ReplySink>>,
    events: broadcast::Sender<ReplyRecord>,
}

impl Default for ReplyBook {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for ReplyBook {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReplyBook")
            .field("replies", &self.replies.lock().unwrap().len())
            .finish_non_exhaustive()
    }
}

impl ReplyBook {
    pub fn new() -> Self {
        ReplyBook {
            replies: Mutex::new(BTreeMap::new()),
            sink: None,
            events: broadcast::channel(256).0,
        }
    }

    pub fn with_sink(mut self, sink: Arc<dyn ReplySink>) -> Self {
        self.sink = Some(sink);
        self
    }

    /// Restores records without persisting or announcing them.
    pub fn restore(&self, records: impl IntoIterator<Item = ReplyRecord>) {
        let mut map = self.replies.lock().unwrap();
        for r in records {
            map.insert(r.reply_id.clone(), r);
        }
    }

    pub fn subscribe(&self) -> broadcast::Receiver<ReplyRecord> {
        self.events.subscribe()
    }

    fn publish(&self, map: &mut BTreeMap<String, ReplyRecord>, record: ReplyRecord) -> Result<()> {
        if let Some(sink) = &self.sink {
            sink.record(&record)?;
        }
        map.insert(record.reply_id.clone(), record.clone());
        // no subscribers is fine
        let _ = self.events.send(record);
        Ok(())
    }

    /// Stores a new record. An id already in use gets a numeric suffix; the
    /// id actually stored is returned.
    pub fn insert(&self, mut record: ReplyRecord) -> Result<String> {
        let mut map = self.replies.lock().unwrap();
        if map.contains_key(&record.reply_id) {
            let base = record.reply_id.clone();
            let n = (1..).find(|n| !map.contains_key(&format!("{base}-{n}"))).unwrap_or(1);
            record.reply_id = format!("{base}-{n}");
        }
        let id = record.reply_id.clone();
        self.publish(&mut map, record)?;
        Ok(id)
    }

    /// Applies `change` under the book lock. When `change` returns
    /// `Ok(false)` nothing is persisted or announced.
    pub fn update(&self, id: &str, change: impl FnOnce(&mut ReplyRecord) -> Result<bool>) -> Result<ReplyRecord> {
        let mut map = self.replies.lock().unwrap();
        let mut record = map.get(id).cloned().ok_or_else(|| Error::NotFound(id.to_owned()))?;
        if change(&mut record)? {
            self.publish(&mut map, record.clone())?;
        }
        Ok(record)
    }

    pub fn get(&self, id: &str) -> Option<ReplyRecord> {
        self.replies.lock().unwrap().get(id).cloned()
    }

    pub fn len(&self) -> usize {
        self.replies.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Matching records ordered by creation time, then id.
    pub fn list(&self, group_id: Option<&str>, state: Option<ReplyState>) -> Vec<ReplyRecord> {
        let mut out: Vec<ReplyRecord> = self
            .replies
            .lock()
            .unwrap()
            .values()
            .filter(|r| group_id.is_none_or(|g| r.group_id() == g))
            .filter(|r| state.is_none_or(|s| r.state == s))
            .cloned()
            .collect();
        out.sort_by(|a, b| (a.created_at, &a.reply_id).cmp(&(b.created_at, &b.reply_id)));
        out
    }
}
