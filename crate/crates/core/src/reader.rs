use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::QuestionRecord;
use crate::extract::content_tokens;
use crate::gateway::{build_reader_prompt, Gateway, GatewayError, PromptTemplates, INSUFFICIENT_INFORMATION};
use crate::synthesis::SynthesizedContext;

#[derive(Debug, Error)]
#[error("question {question_id}: {source}")]
pub struct ReaderError {
    pub question_id: String,
    #[source]
    pub source: GatewayError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReaderKind {
    Llm,
    #[default]
    Extractive,
}

impl fmt::Display for ReaderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReaderKind::Llm => "llm",
            ReaderKind::Extractive => "extractive",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub question_id: String,
    pub text: String,
    pub reader_kind: ReaderKind,
    pub context_token_count: usize,
}

pub fn answer_llm(
    question: &QuestionRecord,
    context: &SynthesizedContext,
    gateway: &Gateway,
    templates: &PromptTemplates,
) -> Result<Answer, ReaderError> {
    let request = build_reader_prompt(templates, gateway.model(), question, context);
    let text = gateway.complete(&request).map_err(|source| ReaderError {
        question_id: question.id.clone(),
        source,
    })?;
    Ok(Answer {
        question_id: question.id.clone(),
        text: text.trim().to_string(),
        reader_kind: ReaderKind::Llm,
        context_token_count: context.token_count,
    })
}

struct Candidate<'a> {
    overlap: usize,
    support: usize,
    key: &'a str,
    order: usize,
    value: &'a str,
}

impl Candidate<'_> {
    fn rank(&self, other: &Self) -> Ordering {
        other
            .overlap
            .cmp(&self.overlap)
            .then_with(|| other.support.cmp(&self.support))
            .then_with(|| self.key.cmp(other.key))
            .then_with(|| self.order.cmp(&other.order))
            .then_with(|| self.value.cmp(other.value))
    }
}

/// Picks the value of the fact (or resolved conflict) whose key shares the
/// most content tokens with the question. Ties go to higher support, then
/// key, then line order, then value.
pub fn answer_extractive(question: &QuestionRecord, context: &SynthesizedContext) -> Answer {
    let q_tokens = content_tokens(&question.question);
    let overlap = |key: &str| content_tokens(key).intersection(&q_tokens).count();
    let facts = context.fact_lines.iter().map(|f| Candidate {
        overlap: overlap(&f.key),
        support: f.support,
        key: &f.key,
        order: f.order,
        value: &f.value,
    });
    let offset = context.fact_lines.len();
    let resolved = context.conflict_lines.iter().filter_map(|c| {
        c.resolution.as_ref().map(|r| Candidate {
            overlap: overlap(&c.key),
            support: r.winning_doc_ids.len(),
            key: &c.key,
            order: offset + c.order,
            value: &r.chosen_value,
        })
    });
    let best = facts.chain(resolved).min_by(|a, b| a.rank(b));
    Answer {
        question_id: question.id.clone(),
        text: best.map_or(INSUFFICIENT_INFORMATION, |c| c.value).to_string(),
        reader_kind: ReaderKind::Extractive,
        context_token_count: context.token_count,
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::consistency::Resolution;
    use crate::gateway::{BackendConfig, ChatBackend, MockBackend};
    use crate::synthesis::{ConflictLine, FactLine, SourceValue};

    fn question(q: &str) -> QuestionRecord {
        QuestionRecord {
            id: "q1".into(),
            question: q.into(),
            gold_answers: vec!["321 c".into()],
            doc_ids: vec![],
            conflict_keys: vec![],
        }
    }

    fn fact(key: &str, value: &str, support: usize, order: usize) -> FactLine {
        FactLine {
            key: key.into(),
            value: value.into(),
            source_doc_ids: vec!["d1".into()],
            support,
            relevance: 0.5,
            order,
        }
    }

    fn ctx(facts: Vec<FactLine>, conflicts: Vec<ConflictLine>) -> SynthesizedContext {
        SynthesizedContext {
            fact_lines: facts,
            conflict_lines: conflicts,
            rendered_text: String::new(),
            token_count: 7,
            ..Default::default()
        }
    }

    #[test]
    fn single_fact_is_the_answer() {
        let q = question("What is the melting point of cadmium?");
        let a = answer_extractive(&q, &ctx(vec![fact("cadmium|melting point", "321 c", 2, 0)], vec![]));
        assert_eq!(a.text, "321 c");
        assert_eq!(a.context_token_count, 7);
        assert_eq!(a.reader_kind, ReaderKind::Extractive);
    }

    #[test]
    fn empty_context_abstains() {
        let a = answer_extractive(&question("Anything?"), &SynthesizedContext::default());
        assert_eq!(a.text, INSUFFICIENT_INFORMATION);
    }

    #[test]
    fn higher_overlap_wins() {
        // Question content tokens: melting, point, cadmium.
        let q = question("What is the melting point of cadmium?");
        let lines = vec![
            fact("cadmium|density", "8.65", 5, 0),            // cadmium -> 1
            fact("cadmium|melting temperature", "321 c", 1, 1), // cadmium, melting -> 2
        ];
        assert_eq!(answer_extractive(&q, &ctx(lines, vec![])).text, "321 c");
    }

    #[test]
    fn resolved_conflicts_are_candidates_unresolved_are_not() {
        let q = question("When was the founding date of Acme?");
        let mut conflict = ConflictLine {
            key: "acme|founding date".into(),
            per_source: vec![
                SourceValue { doc_id: "d1".into(), value: "1998".into() },
                SourceValue { doc_id: "d4".into(), value: "1999".into() },
            ],
            resolution: None,
            relevance: 1.0,
            order: 0,
        };
        assert_eq!(answer_extractive(&q, &ctx(vec![], vec![conflict.clone()])).text, INSUFFICIENT_INFORMATION);
        conflict.resolution = Some(Resolution {
            chosen_value: "1998".into(),
            policy: crate::consistency::Policy::Majority,
            winning_doc_ids: vec!["d1".into(), "d2".into()],
        });
        assert_eq!(answer_extractive(&q, &ctx(vec![], vec![conflict])).text, "1998");
    }

    #[test]
    fn permutation_of_lines_does_not_change_answer() {
        let q = question("What is the melting point of cadmium?");
        let lines = vec![
            fact("cadmium|melting point", "400", 1, 0),
            fact("cadmium|melting point", "321 c", 1, 1),
            fact("cadmium|density", "8.65", 1, 2),
        ];
        let forward = answer_extractive(&q, &ctx(lines.clone(), vec![]));
        let mut reversed = lines;
        reversed.reverse();
        assert_eq!(forward, answer_extractive(&q, &ctx(reversed, vec![])));
        assert_eq!(forward.text, "400");
    }

    fn gateway(mock: MockBackend) -> Gateway {
        Gateway::with_backend(Arc::new(mock), &BackendConfig::default())
    }

    #[test]
    fn llm_answer_is_trimmed_completion() {
        let q = question("What is the melting point of cadmium?");
        let c = SynthesizedContext::from_text("VERIFIED FACTS:\n- cadmium|melting point: 321 c");
        let t = PromptTemplates::builtin();
        let mut mock = MockBackend::new();
        mock.script(&build_reader_prompt(&t, "casc-reader", &q, &c), "  321 c\n");
        let a = answer_llm(&q, &c, &gateway(mock), &t).unwrap();
        assert_eq!(a.text, "321 c");
        assert_eq!(a.reader_kind, ReaderKind::Llm);
        assert_eq!(a.context_token_count, c.token_count);

        let empty = SynthesizedContext::default();
        let mock = MockBackend::new().with_fallback(INSUFFICIENT_INFORMATION);
        assert_eq!(answer_llm(&q, &empty, &gateway(mock), &t).unwrap().text, INSUFFICIENT_INFORMATION);
    }

    struct Slow;
    impl ChatBackend for Slow {
        fn send(&self, _: &crate::gateway::CompletionRequest) -> Result<String, GatewayError> {
            Err(GatewayError::Timeout)
        }
    }

    #[test]
    fn gateway_errors_carry_question_id() {
        let config = BackendConfig {
            max_retries: 0,
            ..Default::default()
        };
        let g = Gateway::with_backend(Arc::new(Slow), &config);
        let err = answer_llm(&question("q?"), &SynthesizedContext::default(), &g, &PromptTemplates::builtin()).unwrap_err();
        assert_eq!(err.question_id, "q1");
        assert!(matches!(err.source, GatewayError::Timeout));
    }
}
