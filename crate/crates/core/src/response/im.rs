use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImEventType {
    Send,
    Recall,
}

/// Outbound instruction for the chat platform.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImEvent {
    #[serde(rename = "type")]
    pub kind: ImEventType,
    pub group_id: String,
    pub reply_id: String,
    pub text: String,
}

pub trait ImAdapter: Send + Sync {
    fn deliver(&self, event: &ImEvent) -> Result<()>;
}

/// Drops every event.
#[derive(Debug, Default)]
pub struct NullAdapter;

impl ImAdapter for NullAdapter {
    fn deliver(&self, _event: &ImEvent) -> Result<()> {
        Ok(())
    }
}

/// Keeps events in memory, in delivery order.
#[derive(Debug, Default)]
pub struct RecordingAdapter(Mutex<Vec<ImEvent>>);

impl RecordingAdapter {
    pub fn events(&self) -> Vec<ImEvent> {
        self.0.lock().unwrap().clone()
    }
}

impl ImAdapter for RecordingAdapter {
    fn deliver(&self, event: &ImEvent) -> Result<()> {
        self.0.lock().unwrap().push(event.clone());
        Ok(())
    }
}

/// POSTs each event as JSON to a webhook.
pub struct WebhookAdapter {
    url: String,
    agent: ureq::Agent,
}

impl WebhookAdapter {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        WebhookAdapter {
            url: url.into(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl ImAdapter for WebhookAdapter {
    fn deliver(&self, event: &ImEvent) -> Result<()> {
        self.agent
            .post(&self.url)
            .send_json(event)
            .map(|_| ())
            .map_err(|e| Error::BackendUnavailable {
                backend: "im_webhook".into(),
                reason: e.to_string(),
            })
    }
}
