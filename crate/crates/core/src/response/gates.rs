use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{prompt, Capability, ChatRequest, Gateway};
use crate::moderation::Moderator;
use crate::retrieval::ContextBundle;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredCheck {
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Withholds answers that do not address the question. Unscorable means
/// withhold.
pub fn relevance_gate(gateway: &Gateway, query: &str, answer: &str, theta: u8) -> ScoredCheck {
    if answer.trim().is_empty() {
        return ScoredCheck {
            passed: false,
            score: None,
            error: Some("empty answer".into()),
        };
    }
    match gateway.score(prompt::ANSWER_RELEVANCE, &[query, answer]) {
        Ok(s) => ScoredCheck {
            passed: s.value >= theta,
            score: Some(s.value),
            error: None,
        },
        Err(err) => ScoredCheck {
            passed: false,
            score: None,
            error: Some(err.to_string()),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecurityCheck {
    TopicScore,
    ExternalService,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecurityReason {
    pub check: SecurityCheck,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecurityVerdict {
    pub allowed: bool,
    /// One entry per failed check.
    pub reasons: Vec<SecurityReason>,
}

/// Scores every outward-bound string for prohibited topics and, when a
/// moderation service is configured, asks it too. Any failure to check
/// counts against the text.
pub fn security_gate(
    gateway: &Gateway,
    moderator: Option<&dyn Moderator>,
    texts: &[&str],
    theta: u8,
) -> SecurityVerdict {
    let mut reasons = Vec::new();
    for (i, text) in texts.iter().enumerate() {
        match gateway.score(prompt::SECURITY_TOPIC, &[text]) {
            Ok(s) if s.value >= theta => reasons.push(SecurityReason {
                check: SecurityCheck::TopicScore,
                detail: format!("text {i} scored {} (threshold {theta})", s.value),
            }),
            Ok(_) => {}
            Err(err) => reasons.push(SecurityReason {
                check: SecurityCheck::TopicScore,
                detail: format!("text {i} unscorable: {err}"),
            }),
        }
        if let Some(m) = moderator {
            match m.flagged(text) {
                Ok(false) => {}
                Ok(true) => reasons.push(SecurityReason {
                    check: SecurityCheck::ExternalService,
                    detail: format!("text {i} flagged"),
                }),
                Err(err) => reasons.push(SecurityReason {
                    check: SecurityCheck::ExternalService,
                    detail: format!("text {i} not checked: {err}"),
                }),
            }
        }
    }
    SecurityVerdict {
        allowed: reasons.is_empty(),
        reasons,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generated {
    pub text: String,
    pub backend: String,
    pub needed_tokens: usize,
    /// No background material was available.
    pub low_evidence: bool,
}

const NO_MATERIAL: &str = "(no background material was found)";

/// Answer prompt: question first, numbered material with citations after.
pub fn answer_request(gateway: &Gateway, query: &str, bundle: &ContextBundle) -> Result<ChatRequest> {
    let material = if bundle.is_empty() { NO_MATERIAL.to_owned() } else { bundle.render() };
    Ok(ChatRequest::user(&gateway.render(prompt::ANSWER, &[query, material.trim_end()])?))
}

/// Picks the cheapest generation backend that fits, falling back to any
/// long-context backend when none does.
pub fn generate_answer(gateway: &Gateway, query: &str, bundle: &ContextBundle) -> Result<Generated> {
    let request = answer_request(gateway, query, bundle)?;
    let needed_tokens = gateway.count_tokens(&request.render());
    let completion = match gateway.complete_request(&request, Capability::Generation) {
        Err(Error::NoCapableBackend { .. }) => gateway.complete_request(&request, Capability::LongContext)?,
        other => other?,
    };
    Ok(Generated {
        text: completion.text,
        backend: completion.backend,
        needed_tokens,
        low_evidence: bundle.is_empty(),
    })
}
