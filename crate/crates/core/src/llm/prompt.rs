//! Versioned prompt templates. Placeholders are positional `{}`.
//!
//! Built-ins live in `templates/<id>.v<version>.txt` and are compiled in; a
//! directory of files with the same naming can override them.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const IS_QUESTION: &str = "is_question";
pub const IS_QUESTION_EXAMPLES: &str = "is_question_examples";
pub const DOC_RELEVANCE: &str = "doc_relevance";
pub const ANSWER_RELEVANCE: &str = "answer_relevance";
pub const SECURITY_TOPIC: &str = "security_topic";
pub const EXTRACT_KEYWORDS: &str = "extract_keywords";
pub const ANSWER: &str = "answer";
pub const PAGING_SUMMARY: &str = "paging_summary";
pub const PAGING_SELECT: &str = "paging_select";

const BUILTIN: &[(&str, u32, &str)] = &[
    (IS_QUESTION, 1, include_str!("../../templates/is_question.v1.txt")),
    (IS_QUESTION_EXAMPLES, 1, include_str!("../../templates/is_question_examples.v1.txt")),
    (DOC_RELEVANCE, 1, include_str!("../../templates/doc_relevance.v1.txt")),
    (ANSWER_RELEVANCE, 1, include_str!("../../templates/answer_relevance.v1.txt")),
    (SECURITY_TOPIC, 1, include_str!("../../templates/security_topic.v1.txt")),
    (EXTRACT_KEYWORDS, 1, include_str!("../../templates/extract_keywords.v1.txt")),
    (ANSWER, 1, include_str!("../../templates/answer.v1.txt")),
    (PAGING_SUMMARY, 1, include_str!("../../templates/paging_summary.v1.txt")),
    (PAGING_SELECT, 1, include_str!("../../templates/paging_select.v1.txt")),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub id: String,
    pub version: u32,
    text: String,
}

impl Template {
    pub fn new(id: &str, version: u32, text: &str) -> Self {
        Template {
            id: id.to_owned(),
            version,
            text: text.trim_end_matches(['\n', '\r']).to_owned(),
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn arity(&self) -> usize {
        self.text.matches("{}").count()
    }

    /// Substitutes `args` in order. Argument text is never re-scanned, so
    /// braces inside arguments are inert.
    pub fn render(&self, args: &[&str]) -> Result<String> {
        let pieces: Vec<&str> = self.text.split("{}").collect();
        if pieces.len() - 1 != args.len() {
            return Err(Error::TemplateArity {
                template: self.id.clone(),
                expected: pieces.len() - 1,
                actual: args.len(),
            });
        }
        let mut out = String::with_capacity(self.text.len() + args.iter().map(|a| a.len()).sum::<usize>());
        for (i, piece) in pieces.iter().enumerate() {
            out.push_str(piece);
            if let Some(arg) = args.get(i) {
                out.push_str(arg);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct PromptLibrary {
    templates: BTreeMap<String, Template>,
}

impl Default for PromptLibrary {
    fn default() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(id, v, text)| (id.to_string(), Template::new(id, *v, text)))
            .collect();
        PromptLibrary { templates }
    }
}

impl PromptLibrary {
    pub fn get(&self, id: &str) -> Result<&Template> {
        self.templates.get(id).ok_or_else(|| Error::UnknownTemplate(id.to_owned()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn insert(&mut self, template: Template) {
        self.templates.insert(template.id.clone(), template);
    }

    /// Applies every `<id>.v<N>.txt` in `dir` on top of the built-ins; for
    /// each id the highest version wins.
    pub fn with_overrides(mut self, dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut found: BTreeMap<String, Template> = BTreeMap::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            let Some(stem) = name.strip_suffix(".txt") else { continue };
            let Some((id, version)) = stem.rsplit_once(".v") else { continue };
            let Ok(version) = version.parse::<u32>() else { continue };
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            if found.get(id).is_none_or(|t| t.version < version) {
                found.insert(id.to_owned(), Template::new(id, version, &text));
            }
        }
        for (_, t) in found {
            self.insert(t);
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn is_question_prompt_is_verbatim() {
        let lib = PromptLibrary::default();
        let t = lib.get(IS_QUESTION).unwrap();
        let expected = "Determine whether the following sentences are topical interrogative sentences, with results ranging from 0 to 10.\n\
Provide scores directly without explanation.\n\
Scoring standards:\n\
A score of 10 for sentences with subject, predicate, and object that are interrogative;\n\
points deducted for missing subject, verb, or object; a score of 0 for declarative sentences;\n\
a score of 0 for non-interrogative sentences.\n\
New question \"{}\", what is the score? Provide scores directly without explanation.";
        assert_eq!(t.text(), expected);
        assert_eq!(t.arity(), 1);
    }

    #[test]
    fn examples_variant_keeps_the_final_instruction() {
        let lib = PromptLibrary::default();
        let plain = lib.get(IS_QUESTION).unwrap().text();
        let ex = lib.get(IS_QUESTION_EXAMPLES).unwrap().text();
        assert!(ex.contains("Question \"Excuse me, how should mmdeploy be installed?\", Score: 9"));
        assert!(ex.contains("Missing subject, Score: 7"));
        assert_eq!(plain.lines().last(), ex.lines().last());
    }

    #[test]
    fn render_checks_arity_and_ignores_arg_braces() {
        let lib = PromptLibrary::default();
        let t = lib.get(DOC_RELEVANCE).unwrap();
        assert!(matches!(t.render(&["q"]), Err(Error::TemplateArity { expected: 2, actual: 1, .. })));
        let out = t.render(&["what is {}?", "fn main() {}"]).unwrap();
        assert!(out.contains("\"what is {}?\""));
        assert!(out.contains("fn main() {}"));
    }

    #[test]
    fn every_builtin_has_placeholders() {
        let lib = PromptLibrary::default();
        for id in lib.ids() {
            assert!(lib.get(id).unwrap().arity() >= 1, "{id}");
        }
        assert!(matches!(lib.get("nope"), Err(Error::UnknownTemplate(_))));
    }

    #[test]
    fn overrides_pick_highest_version() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("answer.v2.txt"), "v2 {} {}").unwrap();
        std::fs::write(dir.path().join("answer.v3.txt"), "v3 {} {}\n").unwrap();
        std::fs::write(dir.path().join("custom.v1.txt"), "hello {}").unwrap();
        std::fs::write(dir.path().join("README"), "ignored").unwrap();
        let lib = PromptLibrary::default().with_overrides(dir.path()).unwrap();
        assert_eq!(lib.get(ANSWER).unwrap().version, 3);
        assert_eq!(lib.get(ANSWER).unwrap().text(), "v3 {} {}");
        assert_eq!(lib.get("custom").unwrap().render(&["x"]).unwrap(), "hello x");
    }
}
