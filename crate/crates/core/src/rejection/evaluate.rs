use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::{check_question_threshold, check_similarity_threshold, question_gate, top_similarity};
use crate::error::{Error, Result};
use crate::llm::Gateway;
use crate::store::FeatureStore;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledQuery {
    pub text: String,
    #[serde(rename = "label")]
    pub is_domain_question: bool,
}

impl LabeledQuery {
    pub fn new(text: impl Into<String>, is_domain_question: bool) -> Self {
        LabeledQuery {
            text: text.into(),
            is_domain_question,
        }
    }
}

/// Reads one `{"text": .., "label": bool}` object per line. Blank lines are
/// skipped; anything else that fails to parse is reported by 1-based line.
pub fn read_corpus(reader: impl BufRead) -> Result<Vec<LabeledQuery>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::MalformedCorpus {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let q: LabeledQuery = serde_json::from_str(&line).map_err(|e| Error::MalformedCorpus {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(q);
    }
    Ok(out)
}

/// Inclusive arithmetic sweep of similarity thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub start: f32,
    pub end: f32,
    pub step: f32,
}

impl Default for ThresholdSweep {
    fn default() -> Self {
        ThresholdSweep {
            start: 0.0,
            end: 1.0,
            step: 0.01,
        }
    }
}

impl ThresholdSweep {
    pub fn thresholds(&self) -> Result<Vec<f32>> {
        check_similarity_threshold(self.start)?;
        check_similarity_threshold(self.end)?;
        if !(self.step > 0.0) || self.end < self.start {
            return Err(Error::InvalidInput(format!("bad sweep {self:?}")));
        }
        // integer stepping avoids float drift past `end`
        let n = ((self.end - self.start) / self.step + 1e-4).floor() as usize;
        Ok((0..=n)
            .map(|i| ((self.start as f64 + i as f64 * self.step as f64) * 1e6).round() as f32 / 1e6)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub threshold: f32,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EvalRow {
    fn from_counts(threshold: f32, tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        // nothing predicted positive counts as precision 0
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        EvalRow {
            threshold,
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Index into `rows`: highest F1, then highest precision, then lowest θ.
    pub best: usize,
}

impl EvalReport {
    pub fn best_row(&self) -> &EvalRow {
        &self.rows[self.best]
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("threshold\tprecision\trecall\tf1\ttp\tfp\tfn\ttn\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:.2}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}\t{}\t{}",
                r.threshold, r.precision, r.recall, r.f1, r.tp, r.fp, r.fn_, r.tn
            );
        }
        let b = self.best_row();
        let _ = writeln!(out, "# best\t{:.2}\t{:.4}\t{:.4}\t{:.4}", b.threshold, b.precision, b.recall, b.f1);
        out
    }
}

/// Sweeps θ_sim over `corpus`. Positive means "accepted as a domain
/// question". With `scorer`, a query must also pass the question gate at
/// its threshold; scores are computed once per query and reused across θ.
pub fn evaluate(
    corpus: &[LabeledQuery],
    store: &FeatureStore,
    scorer: Option<(&Gateway, u8)>,
    sweep: &ThresholdSweep,
) -> Result<EvalReport> {
    if corpus.is_empty()
        || corpus.iter().all(|q| q.is_domain_question)
        || corpus.iter().all(|q| !q.is_domain_question)
    {
        return Err(Error::DegenerateCorpus);
    }
    if let Some((_, theta_q)) = scorer {
        check_question_threshold(theta_q)?;
    }
    let thresholds = sweep.thresholds()?;

    let scored: Vec<(f32, bool, bool)> = corpus
        .iter()
        .map(|q| {
            let (sim, err) = if store.is_empty() {
                (-1.0, Some(()))
            } else {
                let (s, e) = top_similarity(&q.text, store);
                (s, e.map(|_| ()))
            };
            let question_ok = match scorer {
                Some((g, theta_q)) => question_gate(&q.text, g, theta_q).map(|v| v.passed),
                None => Ok(true),
            };
            // an embedding failure never passes, whatever θ is
            let sim = if err.is_some() { f32::NEG_INFINITY } else { sim };
            question_ok.map(|ok| (sim, ok, q.is_domain_question))
        })
        .collect::<Result<_>>()?;

    let rows: Vec<EvalRow> = thresholds
        .iter()
        .map(|&theta| {
            let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
            for &(sim, question_ok, label) in &scored {
                match (sim >= theta && question_ok, label) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
            EvalRow::from_counts(theta, tp, fp, fn_, tn)
        })
        .collect();

    let mut best = 0;
    for (i, r) in rows.iter().enumerate().skip(1) {
        let b = &rows[best];
        if r.f1 > b.f1 || (r.f1 == b.f1 && r.precision > b.precision) {
            best = i;
        }
    }
    Ok(EvalReport { rows, best })
}
