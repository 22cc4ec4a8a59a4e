use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::ChatRequest;
use crate::error::{Error, Result};
use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Worth retrying: timeouts, connection resets, 429 and 5xx.
    Transient(String),
    Fatal(String),
}

impl std::fmt::Display for BackendError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendError::Transient(m) => write!(f, "transient: {m}"),
            BackendError::Fatal(m) => write!(f, "fatal: {m}"),
        }
    }
}

/// One chat model reachable as a remote procedure.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> std::result::Result<String, BackendError>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Every string must occur in the rendered prompt.
    pub contains: Vec<String>,
    pub response: String,
}

/// Fixture file schema for [`ScriptedBackend`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScriptFixture {
    /// SHA-256 hex of the rendered prompt → reply.
    pub responses: HashMap<String, String>,
    /// Consulted in order when no hash matches.
    pub rules: Vec<ScriptRule>,
    /// Reply when nothing else matches; absent means the call fails.
    pub default: Option<String>,
}

/// Deterministic backend replaying canned replies.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    fixture: ScriptFixture,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_fixture(fixture: ScriptFixture) -> Self {
        ScriptedBackend { fixture }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let fixture: ScriptFixture = serde_json::from_str(&raw)?;
        Ok(Self::from_fixture(fixture))
    }

    pub fn fixture(&self) -> &ScriptFixture {
        &self.fixture
    }

    /// Exact reply for one request.
    pub fn with_request(mut self, request: &ChatRequest, response: &str) -> Self {
        self.fixture
            .responses
            .insert(sha256_hex(request.render()), response.to_owned());
        self
    }

    /// Exact reply for a single-turn user prompt, as sent by scoring and
    /// template calls.
    pub fn with_prompt(self, prompt: &str, response: &str) -> Self {
        self.with_request(&ChatRequest::user(prompt), response)
    }

    pub fn with_rule(mut self, contains: &[&str], response: &str) -> Self {
        self.fixture.rules.push(ScriptRule {
            contains: contains.iter().map(|s| s.to_string()).collect(),
            response: response.to_owned(),
        });
        self
    }

    pub fn with_default(mut self, response: &str) -> Self {
        self.fixture.default = Some(response.to_owned());
        self
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> std::result::Result<String, BackendError> {
        let rendered = request.render();
        if let Some(r) = self.fixture.responses.get(&sha256_hex(&rendered)) {
            return Ok(r.clone());
        }
        for rule in &self.fixture.rules {
            if rule.contains.iter().all(|needle| rendered.contains(needle.as_str())) {
                return Ok(rule.response.clone());
            }
        }
        self.fixture
            .default
            .clone()
            .ok_or_else(|| BackendError::Fatal("no scripted response for prompt".into()))
    }
}

#[derive(Serialize)]
struct WireTurn<'a> {
    role: &'a str,
    text: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    system: &'a str,
    turns: Vec<WireTurn<'a>>,
    temperature: f32,
}

#[derive(Deserialize)]
struct WireReply {
    text: String,
}

/// `POST { system, turns: [{role, text}], temperature }` → `{ text }`.
pub struct HttpChatBackend {
    url: String,
    agent: ureq::Agent,
}

impl HttpChatBackend {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        HttpChatBackend {
            url: url.into(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, request: &ChatRequest) -> std::result::Result<String, BackendError> {
        let body = WireRequest {
            system: &request.system,
            turns: request
                .turns
                .iter()
                .map(|t| WireTurn {
                    role: t.role.as_str(),
                    text: &t.text,
                })
                .collect(),
            temperature: request.temperature,
        };
        match self.agent.post(&self.url).send_json(&body) {
            Ok(resp) => resp
                .into_json::<WireReply>()
                .map(|r| r.text)
                .map_err(|e| BackendError::Fatal(format!("bad reply body: {e}"))),
            Err(ureq::Error::Status(code, _)) if code == 429 || code >= 500 => {
                Err(BackendError::Transient(format!("HTTP {code}")))
            }
            Err(ureq::Error::Status(code, _)) => Err(BackendError::Fatal(format!("HTTP {code}"))),
            Err(e) => Err(BackendError::Transient(e.to_string())),
        }
    }
}
