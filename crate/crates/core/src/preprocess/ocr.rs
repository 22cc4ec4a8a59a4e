use std::collections::HashMap;
use std::time::Duration;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::util::sha256_hex;

/// Turns an image into text. The default backend is a no-op.
pub trait OcrBackend: Send + Sync {
    fn extract(&self, image: &[u8]) -> Result<String>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NoopOcr;

impl OcrBackend for NoopOcr {
    fn extract(&self, image: &[u8]) -> Result<String> {
        if image.is_empty() {
            return Err(Error::InvalidInput("image bytes are empty".into()));
        }
        Ok(String::new())
    }
}

/// Test backend keyed by SHA-256 of the image bytes. Unknown images yield "".
#[derive(Debug, Default, Clone)]
pub struct ScriptedOcr {
    by_hash: HashMap<String, String>,
}

impl ScriptedOcr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, image: &[u8], text: &str) -> Self {
        self.by_hash.insert(sha256_hex(image), text.to_owned());
        self
    }

    pub fn from_hashes(by_hash: HashMap<String, String>) -> Self {
        ScriptedOcr { by_hash }
    }
}

impl OcrBackend for ScriptedOcr {
    fn extract(&self, image: &[u8]) -> Result<String> {
        if image.is_empty() {
            return Err(Error::InvalidInput("image bytes are empty".into()));
        }
        Ok(self.by_hash.get(&sha256_hex(image)).cloned().unwrap_or_default())
    }
}

/// POSTs raw image bytes and expects `{ "text": string }`.
pub struct HttpOcr {
    url: String,
    agent: ureq::Agent,
}

impl HttpOcr {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        HttpOcr {
            url: url.into(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

#[derive(Deserialize)]
struct OcrReply {
    text: String,
}

impl OcrBackend for HttpOcr {
    fn extract(&self, image: &[u8]) -> Result<String> {
        if image.is_empty() {
            return Err(Error::InvalidInput("image bytes are empty".into()));
        }
        let reply: OcrReply = self
            .agent
            .post(&self.url)
            .set("content-type", "application/octet-stream")
            .send_bytes(image)
            .map_err(|e| Error::OcrUnavailable(e.to_string()))?
            .into_json()
            .map_err(|e| Error::OcrUnavailable(e.to_string()))?;
        Ok(reply.text)
    }
}
