//! Prompt templates are data: TOML files with `version`, `max_tokens`,
//! `system` and `user` fields. `{{name}}` placeholders are substituted in a
//! single pass, so substituted text is never re-expanded.

use std::fs;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use super::{ChatMessage, CompletionRequest, Role};
use crate::corpus::{Document, QuestionRecord};
use crate::synthesis::SynthesizedContext;

/// The reader's abstention answer.
pub const INSUFFICIENT_INFORMATION: &str = "insufficient information";

/// Sentence the extraction template must carry.
pub const QUOTE_GROUNDING_INSTRUCTION: &str = "Every quote must be copied verbatim from the document.";

const BUILTIN_READER: &str = include_str!("../../templates/reader.toml");
const BUILTIN_EXTRACT: &str = include_str!("../../templates/extract.toml");

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {path}: {detail}")]
    Load { path: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub version: String,
    pub max_tokens: u32,
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    pub fn parse(source: &str, origin: &str) -> Result<Self, TemplateError> {
        toml::from_str(source).map_err(|e| TemplateError::Load {
            path: origin.to_string(),
            detail: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let path = path.as_ref();
        let source = fs::read_to_string(path).map_err(|e| TemplateError::Load {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::parse(&source, &path.display().to_string())
    }

    fn request(&self, model: &str, vars: &[(&str, &str)]) -> CompletionRequest {
        CompletionRequest {
            model: model.to_string(),
            messages: vec![
                ChatMessage {
                    role: Role::System,
                    content: render_template(&self.system, vars),
                },
                ChatMessage {
                    role: Role::User,
                    content: render_template(&self.user, vars),
                },
            ],
            temperature: 0.0,
            max_tokens: self.max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplates {
    pub reader: PromptTemplate,
    pub extract: PromptTemplate,
}

impl PromptTemplates {
    /// The templates shipped in `templates/`.
    pub fn builtin() -> Self {
        Self {
            reader: PromptTemplate::parse(BUILTIN_READER, "templates/reader.toml")
                .expect("builtin reader template parses"),
            extract: PromptTemplate::parse(BUILTIN_EXTRACT, "templates/extract.toml")
                .expect("builtin extract template parses"),
        }
    }

    /// Loads `reader.toml` and `extract.toml` from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let dir = dir.as_ref();
        Ok(Self {
            reader: PromptTemplate::load(dir.join("reader.toml"))?,
            extract: PromptTemplate::load(dir.join("extract.toml"))?,
        })
    }
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Replaces `{{name}}` with the matching value. Unknown placeholders are
/// left as written.
pub fn render_template(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                let name = &after[..end];
                match vars.iter().find(|(k, _)| *k == name) {
                    Some((_, value)) => out.push_str(value),
                    None => {
                        out.push_str("{{");
                        out.push_str(name);
                        out.push_str("}}");
                    }
                }
                rest = &after[end + 2..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn build_reader_prompt(
    templates: &PromptTemplates,
    model: &str,
    question: &QuestionRecord,
    context: &SynthesizedContext,
) -> CompletionRequest {
    templates.reader.request(
        model,
        &[
            ("context", context.rendered_text.as_str()),
            ("question", question.question.as_str()),
        ],
    )
}

pub fn build_extract_prompt(
    templates: &PromptTemplates,
    model: &str,
    question: &QuestionRecord,
    doc: &Document,
) -> CompletionRequest {
    templates.extract.request(
        model,
        &[
            ("question", question.question.as_str()),
            ("doc_id", doc.id.as_str()),
            ("title", doc.title.as_str()),
            ("document", doc.text.as_str()),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn question() -> QuestionRecord {
        QuestionRecord {
            id: "q1".into(),
            question: "What is the melting point of cadmium?".into(),
            gold_answers: vec!["321 c".into()],
            doc_ids: vec![],
            conflict_keys: vec![],
        }
    }

    fn doc() -> Document {
        Document {
            id: "d1".into(),
            title: "Cadmium".into(),
            text: "The melting point of cadmium is 321 C.".into(),
            source_kind: Default::default(),
            timestamp: None,
            metadata: Default::default(),
        }
    }

    #[test]
    fn reader_prompt_carries_context_and_question() {
        let ctx = SynthesizedContext::from_text("VERIFIED FACTS:\n- cadmium|melting point: 321 c");
        let req = build_reader_prompt(&PromptTemplates::builtin(), "m", &question(), &ctx);
        req.validate().unwrap();
        let user = req.user_content().unwrap();
        assert!(user.contains(&ctx.rendered_text));
        assert!(user.contains("Question: What is the melting point of cadmium?"));
        assert_eq!(req.temperature, 0.0);

        let empty = build_reader_prompt(&PromptTemplates::builtin(), "m", &question(), &SynthesizedContext::default());
        empty.validate().unwrap();
        assert!(empty.system_content().unwrap().contains(INSUFFICIENT_INFORMATION));
    }

    #[test]
    fn extract_prompt_is_grounded_and_deterministic() {
        let t = PromptTemplates::builtin();
        let a = build_extract_prompt(&t, "m", &question(), &doc());
        let b = build_extract_prompt(&t, "m", &question(), &doc());
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        assert!(a.user_content().unwrap().contains(&doc().text));
        assert!(a.user_content().unwrap().contains(&question().question));
        assert!(a.system_content().unwrap().contains(QUOTE_GROUNDING_INSTRUCTION));
    }

    #[test]
    fn edited_template_files_take_effect() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("reader.toml"), "version = \"r2\"\nmax_tokens = 8\nsystem = \"Be terse.\"\nuser = \"Q={{question}} C={{context}}\"\n").unwrap();
        fs::write(dir.path().join("extract.toml"), BUILTIN_EXTRACT).unwrap();
        let t = PromptTemplates::load_dir(dir.path()).unwrap();
        let ctx = SynthesizedContext::from_text("ctx");
        let req = build_reader_prompt(&t, "m", &question(), &ctx);
        assert_eq!(req.system_content(), Some("Be terse."));
        assert_eq!(req.user_content(), Some("Q=What is the melting point of cadmium? C=ctx"));
        assert_eq!(req.max_tokens, 8);
    }

    #[test]
    fn substitution_is_single_pass() {
        let out = render_template("{{a}}/{{b}}/{{c}}", &[("a", "{{b}}"), ("b", "x")]);
        assert_eq!(out, "{{b}}/x/{{c}}");
        assert_eq!(render_template("open {{a", &[("a", "x")]), "open {{a");
    }
}
