//! Inbound chat traffic: identity keys, message filtering and per-user
//! packing of consecutive messages into query bundles.

mod aggregate;
mod ocr;

pub use aggregate::Aggregator;
pub use ocr::{HttpOcr, NoopOcr, OcrBackend, ScriptedOcr};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const USER_KEY_SEPARATOR: char = '|';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Text,
    Image,
    Video,
    Emoji,
    Voice,
    QuoteReply,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawMessage {
    pub group_id: String,
    pub user_id: String,
    /// Unix seconds.
    pub timestamp: i64,
    pub kind: MessageKind,
    #[serde(default)]
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quoted_user: Option<String>,
    pub message_id: String,
    /// Image payload for `kind = image`, base64 on the wire.
    #[serde(default, skip_serializing_if = "Option::is_none", with = "base64_bytes")]
    pub image: Option<Vec<u8>>,
}

impl RawMessage {
    pub fn text(group_id: &str, user_id: &str, timestamp: i64, message_id: &str, content: &str) -> Self {
        RawMessage {
            group_id: group_id.to_owned(),
            user_id: user_id.to_owned(),
            timestamp,
            kind: MessageKind::Text,
            content: content.to_owned(),
            quoted_user: None,
            message_id: message_id.to_owned(),
            image: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_id.is_empty() || self.user_id.is_empty() {
            return Err(Error::InvalidIdentifier("group_id and user_id must be non-empty".into()));
        }
        if self.message_id.is_empty() {
            return Err(Error::InvalidInput("message_id must be non-empty".into()));
        }
        match (self.kind, &self.quoted_user) {
            (MessageKind::QuoteReply, None) => {
                Err(Error::InvalidInput("quote_reply requires quoted_user".into()))
            }
            (kind, Some(_)) if kind != MessageKind::QuoteReply => {
                Err(Error::InvalidInput("quoted_user is only valid on quote_reply".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn user_key(&self) -> Result<UserKey> {
        make_user_key(&self.group_id, &self.user_id)
    }
}

/// `group_id|user_id`. Identifiers containing the separator are rejected,
/// never escaped.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserKey(String);

impl UserKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn group_id(&self) -> &str {
        self.split().0
    }

    pub fn user_id(&self) -> &str {
        self.split().1
    }

    pub fn split(&self) -> (&str, &str) {
        self.0
            .split_once(USER_KEY_SEPARATOR)
            .expect("UserKey always holds a separator")
    }

    /// Parse a key previously produced by [`make_user_key`].
    pub fn parse(raw: &str) -> Result<Self> {
        let (group, user) = raw
            .split_once(USER_KEY_SEPARATOR)
            .ok_or_else(|| Error::InvalidIdentifier(format!("{raw:?} has no separator")))?;
        make_user_key(group, user)
    }
}

impl fmt::Display for UserKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn make_user_key(group_id: &str, user_id: &str) -> Result<UserKey> {
    for (name, value) in [("group_id", group_id), ("user_id", user_id)] {
        if value.is_empty() {
            return Err(Error::InvalidIdentifier(format!("{name} is empty")));
        }
        if value.contains(USER_KEY_SEPARATOR) {
            return Err(Error::InvalidIdentifier(format!(
                "{name} {value:?} contains the separator {USER_KEY_SEPARATOR:?}"
            )));
        }
    }
    Ok(UserKey(format!("{group_id}{USER_KEY_SEPARATOR}{user_id}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub min_query_chars: usize,
    pub aggregation_window_seconds: i64,
    pub idle_flush_seconds: i64,
    pub max_bundle_chars: usize,
    /// Quote-replies are kept only when they quote this user.
    pub assistant_identity: String,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            min_query_chars: 6,
            aggregation_window_seconds: 120,
            idle_flush_seconds: 18,
            max_bundle_chars: 4000,
            assistant_identity: "assistant".into(),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.aggregation_window_seconds < 0 || self.idle_flush_seconds < 0 {
            return Err(Error::Config("preprocess windows must be non-negative".into()));
        }
        if self.max_bundle_chars == 0 {
            return Err(Error::Config("max_bundle_chars must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    NonText,
    DirectedElsewhere,
    TooShort,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Filtered {
    /// The message survives; carries the text that enters the bundle
    /// (trimmed content, or OCR output for images).
    Keep(String),
    Drop(DropReason),
}

/// Total function: every well-formed message is either kept with its text or
/// dropped with a reason. OCR failures count as empty text.
pub fn filter_message(msg: &RawMessage, cfg: &PreprocessConfig, ocr: &dyn OcrBackend) -> Filtered {
    let text = match msg.kind {
        MessageKind::Video | MessageKind::Emoji | MessageKind::Voice => {
            return Filtered::Drop(DropReason::NonText)
        }
        MessageKind::QuoteReply => {
            if msg.quoted_user.as_deref() != Some(cfg.assistant_identity.as_str()) {
                return Filtered::Drop(DropReason::DirectedElsewhere);
            }
            msg.content.trim().to_owned()
        }
        MessageKind::Text => msg.content.trim().to_owned(),
        MessageKind::Image => match msg.image.as_deref() {
            Some(bytes) if !bytes.is_empty() => match ocr.extract(bytes) {
                Ok(text) => text.trim().to_owned(),
                Err(err) => {
                    tracing::warn!(message_id = %msg.message_id, %err, "OCR failed, dropping image");
                    String::new()
                }
            },
            _ => String::new(),
        },
    };
    if text.chars().count() < cfg.min_query_chars {
        Filtered::Drop(DropReason::TooShort)
    } else {
        Filtered::Keep(text)
    }
}

/// One aggregated question unit from a single user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryBundle {
    pub user_key: UserKey,
    pub text: String,
    pub window_start: i64,
    pub window_end: i64,
    pub source_message_ids: Vec<String>,
}

impl QueryBundle {
    /// A single-message bundle, used by one-shot queries.
    pub fn single(user_key: UserKey, text: &str, timestamp: i64, message_id: &str) -> Self {
        QueryBundle {
            user_key,
            text: text.to_owned(),
            window_start: timestamp,
            window_end: timestamp,
            source_message_ids: vec![message_id.to_owned()],
        }
    }
}

mod base64_bytes {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match value {
            Some(bytes) => s.serialize_str(&STANDARD.encode(bytes)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        let raw: Option<String> = Option::deserialize(d)?;
        raw.map(|s| STANDARD.decode(s).map_err(serde::de::Error::custom))
            .transpose()
    }
}
