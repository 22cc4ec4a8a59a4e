//! Two-stage refusal filter: topical similarity against the rejection store,
//! then LLM scoring of whether the message is actually a question.
//!
//! Both gates fail closed. An embedding outage, an empty store or an
//! unscorable reply all reject.

mod evaluate;

pub use evaluate::{evaluate, read_corpus, EvalReport, EvalRow, LabeledQuery, ThresholdSweep};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{prompt, Gateway};
use crate::store::FeatureStore;

pub const DEFAULT_SIMILARITY_THRESHOLD: f32 = 0.45;
pub const DEFAULT_QUESTION_THRESHOLD: u8 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionThresholds {
    pub similarity: f32,
    pub question: u8,
}

impl Default for RejectionThresholds {
    fn default() -> Self {
        RejectionThresholds {
            similarity: DEFAULT_SIMILARITY_THRESHOLD,
            question: DEFAULT_QUESTION_THRESHOLD,
        }
    }
}

fn check_similarity_threshold(theta: f32) -> Result<()> {
    if !(-1.0..=1.0).contains(&theta) {
        return Err(Error::InvalidInput(format!("similarity threshold {theta} outside [-1, 1]")));
    }
    Ok(())
}

fn check_question_threshold(theta: u8) -> Result<()> {
    if theta > 10 {
        return Err(Error::InvalidInput(format!("question threshold {theta} outside [0, 10]")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityVerdict {
    pub passed: bool,
    /// −1 when the store is empty or the query could not be embedded.
    pub top_similarity: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionVerdict {
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Top-1 cosine of `query` against `store`; errors and empty stores give −1.
pub fn top_similarity(query: &str, store: &FeatureStore) -> (f32, Option<String>) {
    match store.search_text(query, 1) {
        Ok(hits) => (hits.first().map_or(-1.0, |h| h.similarity), None),
        Err(err) => (-1.0, Some(err.to_string())),
    }
}

/// Passes iff the best match in the rejection store reaches `theta`.
pub fn similarity_gate(query: &str, store: &FeatureStore, theta: f32) -> Result<SimilarityVerdict> {
    check_similarity_threshold(theta)?;
    if store.is_empty() {
        return Ok(SimilarityVerdict {
            passed: false,
            top_similarity: -1.0,
            error: Some("rejection store is empty".into()),
        });
    }
    let (top, error) = top_similarity(query, store);
    Ok(SimilarityVerdict {
        passed: error.is_none() && top >= theta,
        top_similarity: top,
        error,
    })
}

/// Passes iff the `is_question` score reaches `theta`.
pub fn question_gate(query: &str, gateway: &Gateway, theta: u8) -> Result<QuestionVerdict> {
    check_question_threshold(theta)?;
    Ok(match gateway.score(prompt::IS_QUESTION, &[query]) {
        Ok(s) => QuestionVerdict {
            passed: s.value >= theta,
            score: Some(s.value),
            error: None,
        },
        Err(err) => QuestionVerdict {
            passed: false,
            score: None,
            error: Some(err.to_string()),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    None,
    Similarity,
    QuestionScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionDecision {
    pub outcome: Outcome,
    pub stage: Stage,
    pub similarity: SimilarityVerdict,
    /// Absent when the similarity gate already rejected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<QuestionVerdict>,
}

impl RejectionDecision {
    pub fn accepted(&self) -> bool {
        self.outcome == Outcome::Accepted
    }
}

/// Similarity first (cheap, local), question scoring second (an RPC).
pub fn decide(
    query: &str,
    store: &FeatureStore,
    gateway: &Gateway,
    thresholds: &RejectionThresholds,
) -> Result<RejectionDecision> {
    check_question_threshold(thresholds.question)?;
    let similarity = similarity_gate(query, store, thresholds.similarity)?;
    if !similarity.passed {
        return Ok(RejectionDecision {
            outcome: Outcome::Rejected,
            stage: Stage::Similarity,
            similarity,
            question: None,
        });
    }
    let question = question_gate(query, gateway, thresholds.question)?;
    let (outcome, stage) = if question.passed {
        (Outcome::Accepted, Stage::None)
    } else {
        (Outcome::Rejected, Stage::QuestionScore)
    };
    Ok(RejectionDecision {
        outcome,
        stage,
        similarity,
        question: Some(question),
    })
}
