use serde::{Deserialize, Serialize};

use super::{ContextPiece, Source};
use crate::error::{Error, Result};
use crate::llm::TokenCounter;

pub const DEFAULT_BUDGET_TOKENS: usize = 16_000;
pub const LONG_CONTEXT_BUDGET_TOKENS: usize = 32_000;
pub const DEFAULT_RESERVE_TOKENS: usize = 2_000;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBundle {
    pub pieces: Vec<ContextPiece>,
    pub total_tokens: usize,
    /// Distinct origins in piece order.
    pub citations: Vec<String>,
}

impl ContextBundle {
    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    /// Numbered background block for the answer prompt.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, p) in self.pieces.iter().enumerate() {
            out.push_str(&format!("[{}] {} ({})\n{}\n\n", i + 1, p.title, p.origin, p.text.trim_end()));
        }
        out
    }

    fn push(&mut self, piece: ContextPiece) {
        self.total_tokens += piece.tokens;
        if !self.citations.contains(&piece.origin) {
            self.citations.push(piece.origin.clone());
        }
        self.pieces.push(piece);
    }
}

/// Greedy packing in (`priority` rank, relevance desc, origin) order into
/// `budget_tokens - reserve_tokens`. Pieces that do not fit are skipped
/// whole. If nothing at all fits, the first knowledge piece is cut to the
/// cap and becomes the only piece. Sources missing from `priority` are
/// dropped.
pub fn assemble_context(
    mut pieces: Vec<ContextPiece>,
    budget_tokens: usize,
    reserve_tokens: usize,
    priority: &[Source],
    counter: &TokenCounter,
) -> Result<ContextBundle> {
    if budget_tokens <= reserve_tokens {
        return Err(Error::InvalidInput(format!(
            "budget {budget_tokens} must exceed reserve {reserve_tokens}"
        )));
    }
    let cap = budget_tokens - reserve_tokens;
    let rank = |s: Source| priority.iter().position(|&p| p == s);
    pieces.retain(|p| rank(p.source).is_some());
    pieces.sort_by(|a, b| {
        rank(a.source)
            .cmp(&rank(b.source))
            .then_with(|| b.relevance.cmp(&a.relevance))
            .then_with(|| a.origin.cmp(&b.origin))
            .then_with(|| a.title.cmp(&b.title))
    });

    let mut bundle = ContextBundle::default();
    for piece in &pieces {
        if bundle.total_tokens + piece.tokens <= cap {
            bundle.push(piece.clone());
        }
    }
    if bundle.is_empty() {
        if let Some(first) = pieces.iter().find(|p| p.source == Source::Knowledge) {
            let mut cut = first.clone();
            cut.truncate_to(cap, counter);
            bundle.push(cut);
        }
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const ORDER: [Source; 3] = [Source::Knowledge, Source::Repo, Source::Web];

    /// A piece whose text is exactly `tokens` tokens long.
    fn sized(source: Source, tokens: usize, relevance: u8, origin: &str) -> ContextPiece {
        let c = TokenCounter::default();
        let text = "a".repeat(c.chars_for(tokens));
        let p = ContextPiece::new(source, origin, text, relevance, origin, &c);
        assert_eq!(p.tokens, tokens);
        p
    }

    #[test]
    fn greedy_example() {
        let c = TokenCounter::default();
        let pieces = vec![
            sized(Source::Web, 4000, 9, "https://pytorch.org"),
            sized(Source::Repo, 6000, 5, "repo/a.py"),
            sized(Source::Knowledge, 8000, 7, "kb.md"),
        ];
        // the worked example only balances with nothing held in reserve
        let b = assemble_context(pieces, 14_000, 0, &ORDER, &c).unwrap();
        let sources: Vec<_> = b.pieces.iter().map(|p| p.source).collect();
        assert_eq!(sources, vec![Source::Knowledge, Source::Repo]);
        assert_eq!(b.total_tokens, 14_000);
        assert_eq!(b.citations, vec!["kb.md", "repo/a.py"]);
    }

    #[test]
    fn empty_and_bad_budget() {
        let c = TokenCounter::default();
        assert!(assemble_context(Vec::new(), 100, 10, &ORDER, &c).unwrap().is_empty());
        assert!(assemble_context(Vec::new(), 10, 10, &ORDER, &c).is_err());
    }

    #[test]
    fn oversized_sole_knowledge_piece_is_cut() {
        let c = TokenCounter::default();
        let b = assemble_context(vec![sized(Source::Knowledge, 20_000, 8, "big.md")], 14_000, 2_000, &ORDER, &c)
            .unwrap();
        assert_eq!(b.pieces.len(), 1);
        assert_eq!(b.total_tokens, 12_000);
        assert!(b.pieces[0].title.ends_with("[truncated]"));
        // oversize web pieces are never cut
        let w = assemble_context(vec![sized(Source::Web, 20_000, 8, "u")], 14_000, 2_000, &ORDER, &c).unwrap();
        assert!(w.is_empty());
    }

    #[test]
    fn render_numbers_pieces() {
        let c = TokenCounter::default();
        let b = assemble_context(
            vec![ContextPiece::new(Source::Knowledge, "Install", "pip install mmcv\n", 8, "docs/install.md", &c)],
            100,
            10,
            &ORDER,
            &c,
        )
        .unwrap();
        assert_eq!(b.render(), "[1] Install (docs/install.md)\npip install mmcv\n\n");
    }

    fn arb_piece() -> impl Strategy<Value = ContextPiece> {
        (0..3usize, 0..3000usize, 0..=10u8, 0..20u32).prop_map(|(s, tokens, rel, o)| {
            let c = TokenCounter::default();
            let text = "w".repeat(c.chars_for(tokens));
            ContextPiece::new(ORDER[s], format!("t{o}"), text, rel, format!("o{o}"), &c)
        })
    }

    proptest! {
        #[test]
        fn bundle_respects_budget_and_order(
            pieces in proptest::collection::vec(arb_piece(), 0..30),
            budget in 100..20_000usize,
            reserve_frac in 0.0..0.9f64,
        ) {
            let c = TokenCounter::default();
            let reserve = (budget as f64 * reserve_frac) as usize;
            let b = assemble_context(pieces.clone(), budget, reserve, &ORDER, &c).unwrap();
            prop_assert!(b.total_tokens <= budget - reserve);
            prop_assert_eq!(b.total_tokens, b.pieces.iter().map(|p| p.tokens).sum::<usize>());
            for p in &b.pieces {
                prop_assert_eq!(p.tokens, c.count(&p.text));
            }
            for w in b.pieces.windows(2) {
                let (ra, rb) = (w[0].source as u8, w[1].source as u8);
                prop_assert!(ra <= rb);
                if ra == rb {
                    prop_assert!(w[0].relevance >= w[1].relevance);
                }
            }
            // greedy maximality: every skipped piece would have overflowed at its turn
            if !b.pieces.iter().any(|p| p.title.ends_with("[truncated]")) {
                let included = b.pieces.len();
                let fitting = pieces.iter().filter(|p| p.tokens <= budget - reserve).count();
                prop_assert!(fitting == 0 || included > 0);
            }
        }
    }
}
