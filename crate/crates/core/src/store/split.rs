//! Chunkers: markdown sections, fixed character windows, and the two combined.
//!
//! All offsets are in characters (Unicode scalar values), not bytes.

use serde::{Deserialize, Serialize};

use super::{doc_id_for, Chunk};
use crate::error::{Error, Result};
use crate::llm::TokenCounter;

pub const DEFAULT_MAX_CHARS: usize = 768;
pub const DEFAULT_OVERLAP: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum SplitMethod {
    Markdown,
    Chars { max_chars: usize, overlap: usize },
    Hybrid { max_chars: usize, overlap: usize },
}

impl Default for SplitMethod {
    fn default() -> Self {
        SplitMethod::Hybrid {
            max_chars: DEFAULT_MAX_CHARS,
            overlap: DEFAULT_OVERLAP,
        }
    }
}

impl SplitMethod {
    pub fn split(&self, text: &str) -> Result<Vec<Chunk>> {
        match *self {
            SplitMethod::Markdown => Ok(split_markdown(text)),
            SplitMethod::Chars { max_chars, overlap } => split_chars(text, max_chars, overlap),
            SplitMethod::Hybrid { max_chars, overlap } => split_hybrid(text, max_chars, overlap),
        }
    }
}

/// Character offset → byte offset table, with one trailing entry for the end.
struct CharMap<'a> {
    text: &'a str,
    bytes: Vec<usize>,
}

impl<'a> CharMap<'a> {
    fn new(text: &'a str) -> Self {
        let mut bytes: Vec<usize> = text.char_indices().map(|(i, _)| i).collect();
        bytes.push(text.len());
        CharMap { text, bytes }
    }

    fn len(&self) -> usize {
        self.bytes.len() - 1
    }

    fn slice(&self, start: usize, end: usize) -> &'a str {
        &self.text[self.bytes[start]..self.bytes[end]]
    }
}

struct Section {
    header_path: Vec<String>,
    start: usize,
    end: usize,
}

fn is_fence(line: &str) -> bool {
    let t = line.trim_start();
    t.starts_with("```") || t.starts_with("~~~")
}

/// Splits into header-delimited sections. Header lines (and their line
/// terminator) belong to no section. Lines inside fenced code blocks are
/// never headers.
fn sections(map: &CharMap<'_>) -> Vec<Section> {
    let mut out = Vec::new();
    let mut stack: Vec<(usize, String)> = Vec::new();
    let mut section_start = 0;
    let mut pos = 0;
    let mut in_fence = false;
    for line in map.text.split_inclusive('\n') {
        let line_chars = line.chars().count();
        if is_fence(line) {
            in_fence = !in_fence;
        } else if !in_fence && line.starts_with('#') {
            out.push(Section {
                header_path: stack.iter().map(|(_, h)| h.clone()).collect(),
                start: section_start,
                end: pos,
            });
            let level = line.chars().take_while(|&c| c == '#').count();
            let title = line.trim_start_matches('#').trim().to_owned();
            while stack.last().is_some_and(|(l, _)| *l >= level) {
                stack.pop();
            }
            stack.push((level, title));
            section_start = pos + line_chars;
        }
        pos += line_chars;
    }
    out.push(Section {
        header_path: stack.into_iter().map(|(_, h)| h).collect(),
        start: section_start,
        end: pos,
    });
    out
}

fn char_windows(start: usize, end: usize, max_chars: usize, overlap: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if start >= end {
        return out;
    }
    let step = max_chars - overlap;
    let mut s = start;
    loop {
        let e = (s + max_chars).min(end);
        out.push((s, e));
        if e == end {
            break;
        }
        s += step;
    }
    out
}

fn check_window(max_chars: usize, overlap: usize) -> Result<()> {
    if max_chars == 0 {
        return Err(Error::InvalidInput("max_chars must be positive".into()));
    }
    if overlap >= max_chars {
        return Err(Error::InvalidInput(format!(
            "overlap {overlap} must be smaller than max_chars {max_chars}"
        )));
    }
    Ok(())
}

fn build(text: &str, map: &CharMap<'_>, spans: Vec<(Vec<String>, usize, usize)>) -> Vec<Chunk> {
    let doc_id = doc_id_for(text);
    let counter = TokenCounter::default();
    spans
        .into_iter()
        .filter(|(_, s, e)| !map.slice(*s, *e).trim().is_empty())
        .enumerate()
        .map(|(i, (header_path, start, end))| {
            let body = map.slice(start, end).to_owned();
            Chunk {
                chunk_id: format!("{}:{i:04}", &doc_id[..16]),
                doc_id: doc_id.clone(),
                header_path,
                token_count: counter.count(&body),
                body,
                char_span: (start, end),
            }
        })
        .collect()
}

/// One chunk per markdown section; whitespace-only sections are skipped.
pub fn split_markdown(text: &str) -> Vec<Chunk> {
    let map = CharMap::new(text);
    let spans = sections(&map)
        .into_iter()
        .map(|s| (s.header_path, s.start, s.end))
        .collect();
    build(text, &map, spans)
}

/// Fixed windows of `max_chars` advancing by `max_chars - overlap`; the last
/// window may be shorter.
pub fn split_chars(text: &str, max_chars: usize, overlap: usize) -> Result<Vec<Chunk>> {
    check_window(max_chars, overlap)?;
    let map = CharMap::new(text);
    let spans = char_windows(0, map.len(), max_chars, overlap)
        .into_iter()
        .map(|(s, e)| (Vec::new(), s, e))
        .collect();
    Ok(build(text, &map, spans))
}

/// Markdown sections first; any section longer than `max_chars` is cut into
/// character windows that inherit its header path.
pub fn split_hybrid(text: &str, max_chars: usize, overlap: usize) -> Result<Vec<Chunk>> {
    check_window(max_chars, overlap)?;
    let map = CharMap::new(text);
    let mut spans = Vec::new();
    for section in sections(&map) {
        if section.end - section.start <= max_chars {
            spans.push((section.header_path, section.start, section.end));
        } else {
            for (s, e) in char_windows(section.start, section.end, max_chars, overlap) {
                spans.push((section.header_path.clone(), s, e));
            }
        }
    }
    Ok(build(text, &map, spans))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spans(chunks: &[Chunk]) -> Vec<(usize, usize)> {
        chunks.iter().map(|c| c.char_span).collect()
    }

    #[test]
    fn markdown_two_sections() {
        let chunks = split_markdown("# A\nx\n## B\ny");
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].header_path, vec!["A"]);
        assert_eq!(chunks[1].header_path, vec!["A", "B"]);
        // the newline ending "x" stays with its section
        assert_eq!(chunks[0].body.trim_end(), "x");
        assert_eq!(chunks[1].body, "y");
        assert_eq!(spans(&chunks), vec![(4, 6), (11, 12)]);
    }

    #[test]
    fn markdown_sibling_headers_pop_stack() {
        let chunks = split_markdown("# A\n## B\nb\n## C\nc\n# D\nd\n");
        let paths: Vec<_> = chunks.iter().map(|c| c.header_path.join("/")).collect();
        assert_eq!(paths, vec!["A/B", "A/C", "D"]);
    }

    #[test]
    fn markdown_no_headers_and_empty() {
        let chunks = split_markdown("plain text\nmore text");
        assert_eq!(chunks.len(), 1);
        assert!(chunks[0].header_path.is_empty());
        assert!(split_markdown("").is_empty());
    }

    #[test]
    fn markdown_ignores_hash_in_code_fence() {
        let text = "# Install\n```bash\n# not a header\npip install mmcv\n```\n";
        let chunks = split_markdown(text);
        assert_eq!(chunks.len(), 1);
        assert!(chunks[0].body.contains("# not a header"));
    }

    #[test]
    fn chars_without_overlap() {
        let chunks = split_chars("abcdefghij", 4, 0).unwrap();
        let sizes: Vec<_> = chunks.iter().map(|c| c.body.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn chars_with_overlap() {
        // windows start at 0, 2, 4, 6; the one starting at 6 reaches the end
        let chunks = split_chars("abcdefghij", 4, 2).unwrap();
        assert_eq!(spans(&chunks), vec![(0, 4), (2, 6), (4, 8), (6, 10)]);
    }

    #[test]
    fn chars_short_text_single_chunk() {
        assert_eq!(split_chars("abc", 4, 1).unwrap().len(), 1);
        assert!(split_chars("abc", 4, 4).is_err());
        assert!(split_chars("abc", 0, 0).is_err());
    }

    #[test]
    fn chars_counts_unicode_scalars() {
        let chunks = split_chars("模型部署指南文档", 3, 0).unwrap();
        let bodies: Vec<_> = chunks.iter().map(|c| c.body.as_str()).collect();
        assert_eq!(bodies, vec!["模型部", "署指南", "文档"]);
    }

    #[test]
    fn hybrid_oversized_section_shares_header() {
        let text = format!("# Big\n{}\n# Small\nok\n", "w".repeat(25));
        let chunks = split_hybrid(&text, 10, 0).unwrap();
        let big: Vec<_> = chunks.iter().filter(|c| c.header_path == ["Big"]).collect();
        assert_eq!(big.len(), 3);
        assert_eq!(chunks.last().unwrap().header_path, vec!["Small"]);
    }

    #[test]
    fn hybrid_degenerates_to_each_rule() {
        let small = "# A\nshort\n## B\nalso short\n";
        assert_eq!(split_hybrid(small, 100, 10).unwrap(), split_markdown(small));
        let flat = "n".repeat(50);
        assert_eq!(split_hybrid(&flat, 8, 3).unwrap(), split_chars(&flat, 8, 3).unwrap());
    }

    #[test]
    fn chunk_fields_consistent() {
        let text = "# T\nsome body text\n";
        let c = &split_markdown(text)[0];
        assert_eq!(c.doc_id, doc_id_for(text));
        assert_eq!(c.token_count, TokenCounter::default().count(&c.body));
    }

    /// Independent statement of what markdown splitting must preserve: drop
    /// header lines outside fences, then drop whitespace-only runs between
    /// headers.
    fn markdown_residue(text: &str) -> String {
        let mut out = String::new();
        let mut section = String::new();
        let mut fence = false;
        for line in text.split_inclusive('\n') {
            if is_fence(line) {
                fence = !fence;
            } else if !fence && line.starts_with('#') {
                if !section.trim().is_empty() {
                    out.push_str(&section);
                }
                section.clear();
                continue;
            }
            section.push_str(line);
        }
        if !section.trim().is_empty() {
            out.push_str(&section);
        }
        out
    }

    fn md_text() -> impl Strategy<Value = String> {
        prop::collection::vec(
            prop_oneof![
                "#{1,3} [a-z]{1,6}",
                "[a-z ]{0,40}",
                Just(String::from("```")),
                Just(String::new()),
                "[é模a-z]{1,12}",
            ],
            0..25,
        )
        .prop_map(|lines| lines.join("\n"))
    }

    proptest! {
        #[test]
        fn markdown_bodies_reproduce_residue(text in md_text()) {
            let chunks = split_markdown(&text);
            let joined: String = chunks.iter().map(|c| c.body.as_str()).collect();
            prop_assert_eq!(joined, markdown_residue(&text));
            for w in chunks.windows(2) {
                prop_assert!(w[0].char_span.1 <= w[1].char_span.0);
            }
        }

        #[test]
        fn hybrid_without_overlap_reproduces_residue(text in md_text(), max in 1usize..30) {
            let chunks = split_hybrid(&text, max, 0).unwrap();
            let joined: String = chunks.iter().map(|c| c.body.as_str()).collect();
            // hybrid may drop whitespace-only windows inside a section
            let residue = markdown_residue(&text);
            prop_assert_eq!(
                joined.chars().filter(|c| !c.is_whitespace()).collect::<String>(),
                residue.chars().filter(|c| !c.is_whitespace()).collect::<String>()
            );
            for c in &chunks {
                prop_assert!(c.char_span.1 - c.char_span.0 <= max);
                let body: String = text.chars().skip(c.char_span.0).take(c.char_span.1 - c.char_span.0).collect();
                prop_assert_eq!(&body, &c.body);
            }
            for w in chunks.windows(2) {
                prop_assert!(w[0].char_span.1 <= w[1].char_span.0);
            }
        }
    }
}
