//! External content-moderation service used by web filtering and the
//! outbound security check.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Moderator: Send + Sync {
    /// `Ok(true)` when the service flags `text`.
    fn flagged(&self, text: &str) -> Result<bool>;
}

/// Flags any text containing one of the listed substrings (case-insensitive).
#[derive(Debug, Clone, Default)]
pub struct KeywordModerator {
    banned: Vec<String>,
}

impl KeywordModerator {
    pub fn new<S: AsRef<str>>(banned: &[S]) -> Self {
        KeywordModerator {
            banned: banned.iter().map(|s| s.as_ref().to_lowercase()).collect(),
        }
    }
}

impl Moderator for KeywordModerator {
    fn flagged(&self, text: &str) -> Result<bool> {
        let lower = text.to_lowercase();
        Ok(self.banned.iter().any(|b| lower.contains(b.as_str())))
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct WireReply {
    flagged: bool,
}

/// `POST { text }` → `{ flagged }`.
pub struct HttpModerator {
    url: String,
    agent: ureq::Agent,
}

impl HttpModerator {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        HttpModerator {
            url: url.into(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl Moderator for HttpModerator {
    fn flagged(&self, text: &str) -> Result<bool> {
        let resp = self
            .agent
            .post(&self.url)
            .send_json(WireRequest { text })
            .map_err(|e| Error::ModerationUnavailable(e.to_string()))?;
        resp.into_json::<WireReply>()
            .map(|r| r.flagged)
            .map_err(|e| Error::ModerationUnavailable(format!("bad reply body: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::test_http::{dead_url, StubResponse, StubServer};

    #[test]
    fn keyword_flags() {
        let m = KeywordModerator::new(&["Gambling"]);
        assert!(m.flagged("online gambling tips").unwrap());
        assert!(!m.flagged("install mmcv").unwrap());
    }

    #[test]
    fn http_wire_and_outage() {
        let server = StubServer::new(|req| {
            let flagged = req.body_json()["text"].as_str().unwrap().contains("bad");
            StubResponse {
                status: 200,
                body: format!("{{\"flagged\":{flagged}}}"),
            }
        });
        let m = HttpModerator::new(server.url("/moderate"), Duration::from_secs(2));
        assert!(m.flagged("bad words").unwrap());
        assert!(!m.flagged("fine").unwrap());
        let down = HttpModerator::new(dead_url(), Duration::from_millis(300));
        assert!(matches!(down.flagged("x"), Err(Error::ModerationUnavailable(_))));
    }
}
