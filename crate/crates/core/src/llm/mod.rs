//! Hybrid LLM service: several chat backends behind one gateway, chosen per
//! call by capability, context length and cost. Integer scores parsed from
//! replies drive the engine's control flow.

mod backend;
mod limiter;
pub mod prompt;

pub use backend::{BackendError, ChatBackend, HttpChatBackend, ScriptFixture, ScriptRule, ScriptedBackend};
pub use limiter::RateLimiter;
pub use prompt::{PromptLibrary, Template};

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Scoring,
    Generation,
    LongContext,
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Capability::Scoring => "scoring",
            Capability::Generation => "generation",
            Capability::LongContext => "long_context",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub name: String,
    pub endpoint: String,
    pub max_tokens: usize,
    pub capabilities: BTreeSet<Capability>,
    /// Lower is cheaper.
    pub cost_rank: u32,
    /// Requests per minute; 0 means unlimited.
    #[serde(default)]
    pub rpm_limit: u32,
}

impl BackendProfile {
    pub fn new(name: &str, max_tokens: usize, capabilities: &[Capability], cost_rank: u32) -> Self {
        BackendProfile {
            name: name.to_owned(),
            endpoint: String::new(),
            max_tokens,
            capabilities: capabilities.iter().copied().collect(),
            cost_rank,
            rpm_limit: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("backend name is empty".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config(format!("backend {}: max_tokens must be positive", self.name)));
        }
        if self.capabilities.is_empty() {
            return Err(Error::Config(format!("backend {}: no capabilities", self.name)));
        }
        Ok(())
    }

    pub fn has(&self, cap: Capability) -> bool {
        self.capabilities.contains(&cap)
    }
}

/// The three-role chat template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Bot,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Bot => "bot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn new(role: Role, text: &str) -> Self {
        Turn {
            role,
            text: text.to_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub turns: Vec<Turn>,
    pub temperature: f32,
}

impl ChatRequest {
    /// Single user turn, no system prompt, temperature 0.
    pub fn user(prompt: &str) -> Self {
        ChatRequest {
            system: String::new(),
            turns: vec![Turn::new(Role::User, prompt)],
            temperature: 0.0,
        }
    }

    /// Canonical text form: token budgeting and scripted fixtures are both
    /// computed over this.
    pub fn render(&self) -> String {
        let mut out = String::new();
        if !self.system.is_empty() {
            out.push_str("system: ");
            out.push_str(&self.system);
            out.push('\n');
        }
        for t in &self.turns {
            out.push_str(t.role.as_str());
            out.push_str(": ");
            out.push_str(&t.text);
            out.push('\n');
        }
        out
    }
}

/// `ceil(chars / chars_per_token)`, a model-agnostic estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenCounter {
    pub chars_per_token: f64,
}

impl Default for TokenCounter {
    fn default() -> Self {
        TokenCounter { chars_per_token: 3.5 }
    }
}

impl TokenCounter {
    pub fn new(chars_per_token: f64) -> Result<Self> {
        if !(chars_per_token.is_finite() && chars_per_token > 0.0) {
            return Err(Error::Config(format!("chars_per_token must be positive, got {chars_per_token}")));
        }
        Ok(TokenCounter { chars_per_token })
    }

    pub fn count(&self, text: &str) -> usize {
        self.count_chars(text.chars().count())
    }

    pub fn count_chars(&self, chars: usize) -> usize {
        (chars as f64 / self.chars_per_token).ceil() as usize
    }

    /// Largest character count guaranteed to stay within `tokens`.
    pub fn chars_for(&self, tokens: usize) -> usize {
        let mut chars = (tokens as f64 * self.chars_per_token).floor() as usize;
        while chars > 0 && self.count_chars(chars) > tokens {
            chars -= 1;
        }
        chars
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub value: u8,
    pub raw_text: String,
    pub backend: String,
}

/// First decimal integer in `raw`, which must lie in `[0, 10]`. Surrounding
/// prose is tolerated; a leading minus sign makes the number negative.
pub fn parse_score(raw: &str) -> Result<u8> {
    let fail = || Error::ParseFailure { raw: raw.to_owned() };
    let bytes = raw.as_bytes();
    let start = bytes.iter().position(u8::is_ascii_digit).ok_or_else(fail)?;
    let end = bytes[start..]
        .iter()
        .position(|b| !b.is_ascii_digit())
        .map_or(bytes.len(), |n| start + n);
    if start > 0 && bytes[start - 1] == b'-' {
        return Err(fail());
    }
    let value: u64 = raw[start..end].parse().map_err(|_| fail())?;
    if value > 10 {
        return Err(fail());
    }
    Ok(value as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 2,
            base_delay: Duration::from_millis(200),
        }
    }
}

struct Registered {
    profile: BackendProfile,
    client: Arc<dyn ChatBackend>,
    limiter: RateLimiter,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub backend: String,
}

/// Shareable across threads; each backend's limiter serializes admission
/// while calls themselves run concurrently.
pub struct Gateway {
    backends: Vec<Registered>,
    counter: TokenCounter,
    prompts: PromptLibrary,
    retry: RetryPolicy,
    scoring_examples: bool,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("backends", &self.backends.iter().map(|b| &b.profile.name).collect::<Vec<_>>())
            .field("counter", &self.counter)
            .field("scoring_examples", &self.scoring_examples)
            .finish()
    }
}

impl Default for Gateway {
    fn default() -> Self {
        Gateway::new(TokenCounter::default())
    }
}

impl Gateway {
    pub fn new(counter: TokenCounter) -> Self {
        Gateway {
            backends: Vec::new(),
            counter,
            prompts: PromptLibrary::default(),
            retry: RetryPolicy::default(),
            scoring_examples: false,
        }
    }

    pub fn with_prompts(mut self, prompts: PromptLibrary) -> Self {
        self.prompts = prompts;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Switches question scoring to the variant with worked examples. The
    /// parse contract is unchanged.
    pub fn with_scoring_examples(mut self, enabled: bool) -> Self {
        self.scoring_examples = enabled;
        self
    }

    pub fn register(&mut self, profile: BackendProfile, client: Arc<dyn ChatBackend>) -> Result<()> {
        profile.validate()?;
        if self.backends.iter().any(|b| b.profile.name == profile.name) {
            return Err(Error::Config(format!("duplicate backend {}", profile.name)));
        }
        self.backends.push(Registered {
            limiter: RateLimiter::new(profile.rpm_limit),
            profile,
            client,
        });
        Ok(())
    }

    pub fn profiles(&self) -> impl Iterator<Item = &BackendProfile> {
        self.backends.iter().map(|b| &b.profile)
    }

    pub fn counter(&self) -> &TokenCounter {
        &self.counter
    }

    pub fn prompts(&self) -> &PromptLibrary {
        &self.prompts
    }

    pub fn count_tokens(&self, text: &str) -> usize {
        self.counter.count(text)
    }

    /// Cheapest backend with `capability` and room for `needed_tokens`; ties
    /// go to the lexicographically smaller name.
    pub fn select_backend(&self, needed_tokens: usize, capability: Capability) -> Result<&BackendProfile> {
        self.profiles()
            .filter(|p| p.has(capability) && p.max_tokens >= needed_tokens)
            .min_by(|a, b| (a.cost_rank, &a.name).cmp(&(b.cost_rank, &b.name)))
            .ok_or(Error::NoCapableBackend {
                capability: capability.to_string(),
                needed: needed_tokens,
            })
    }

    /// Sends `request` to the backend named by `profile`, retrying transient
    /// failures with exponential backoff.
    pub fn chat(&self, request: &ChatRequest, profile: &BackendProfile) -> Result<String> {
        let reg = self
            .backends
            .iter()
            .find(|b| b.profile.name == profile.name)
            .ok_or_else(|| Error::Config(format!("backend {} is not registered", profile.name)))?;
        let needed = self.counter.count(&request.render());
        if needed > reg.profile.max_tokens {
            return Err(Error::ContextOverflow {
                backend: reg.profile.name.clone(),
                needed,
                limit: reg.profile.max_tokens,
            });
        }
        let mut attempt = 0;
        loop {
            reg.limiter.acquire();
            match reg.client.complete(request) {
                Ok(text) => return Ok(text),
                Err(BackendError::Transient(reason)) if attempt < self.retry.max_retries => {
                    let delay = self.retry.base_delay * 2u32.pow(attempt);
                    tracing::debug!(backend = %reg.profile.name, attempt, %reason, ?delay, "retrying");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(err) => {
                    return Err(Error::BackendUnavailable {
                        backend: reg.profile.name.clone(),
                        reason: err.to_string(),
                    })
                }
            }
        }
    }

    pub fn render(&self, template_id: &str, args: &[&str]) -> Result<String> {
        self.prompts.get(template_id)?.render(args)
    }

    /// Renders a template as a single user turn and sends it to the
    /// cheapest backend with `capability` that fits.
    pub fn complete(&self, template_id: &str, args: &[&str], capability: Capability) -> Result<Completion> {
        let request = ChatRequest::user(&self.render(template_id, args)?);
        self.complete_request(&request, capability)
    }

    pub fn complete_request(&self, request: &ChatRequest, capability: Capability) -> Result<Completion> {
        let needed = self.counter.count(&request.render());
        let profile = self.select_backend(needed, capability)?.clone();
        let text = self.chat(request, &profile)?;
        Ok(Completion {
            text,
            backend: profile.name,
        })
    }

    /// Integer score in `[0, 10]`. An unparsable reply is retried once with
    /// the same prompt before giving up.
    pub fn score(&self, template_id: &str, args: &[&str]) -> Result<ScoreResult> {
        let template_id = if template_id == prompt::IS_QUESTION && self.scoring_examples {
            prompt::IS_QUESTION_EXAMPLES
        } else {
            template_id
        };
        let request = ChatRequest::user(&self.render(template_id, args)?);
        let needed = self.counter.count(&request.render());
        let profile = self.select_backend(needed, Capability::Scoring)?.clone();
        let mut raw = String::new();
        for _ in 0..2 {
            raw = self.chat(&request, &profile)?;
            if let Ok(value) = parse_score(&raw) {
                return Ok(ScoreResult {
                    value,
                    raw_text: raw,
                    backend: profile.name,
                });
            }
        }
        Err(Error::UnscorableResponse {
            backend: profile.name,
            raw,
        })
    }
}
