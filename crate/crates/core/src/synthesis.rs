//! Budgeted, structured context rendering.
//!
//! The synthesized context is a fixed line grammar:
//!
//! ```text
//! VERIFIED FACTS:
//! - <key>: <value> [sources: d1,d2] (support=2)
//! CONFLICTS:
//! - <key>: d1 says 1998; d4 says 1999 — UNRESOLVED
//! ```
//!
//! Empty sections are omitted. Token counts always come from
//! [`tokenize`] over the rendered text.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{ClaimGroup, ConsistencyReport, Resolution};
use crate::corpus::{tokenize, Corpus, QuestionRecord};
use crate::extract::{content_tokens, key_relevance, Claim};
use crate::retrieval::RetrievedSet;

pub const FACTS_HEADER: &str = "VERIFIED FACTS:";
pub const EXTRACTED_HEADER: &str = "EXTRACTED FACTS:";
pub const CONFLICTS_HEADER: &str = "CONFLICTS:";
pub const UNRESOLVED: &str = "UNRESOLVED";
pub const MIN_BUDGET: usize = 16;
pub const DEFAULT_BUDGET: usize = 405;

#[derive(Debug, Error, PartialEq)]
pub enum SynthesisError {
    #[error("token budget {budget} cannot hold the section header and one line ({needed} tokens)")]
    BudgetTooSmall { budget: usize, needed: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactLine {
    pub key: String,
    pub value: String,
    pub source_doc_ids: Vec<String>,
    pub support: usize,
    pub relevance: f64,
    /// Position used as the last tie-break by readers: priority rank for
    /// synthesized lines, extraction order for per-claim lines.
    pub order: usize,
}

impl FactLine {
    pub fn render(&self) -> String {
        format!(
            "- {}: {} [sources: {}] (support={})",
            self.key,
            self.value,
            self.source_doc_ids.join(","),
            self.support
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceValue {
    pub doc_id: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictLine {
    pub key: String,
    pub per_source: Vec<SourceValue>,
    pub resolution: Option<Resolution>,
    pub relevance: f64,
    pub order: usize,
}

impl ConflictLine {
    pub fn render(&self) -> String {
        let claims = self
            .per_source
            .iter()
            .map(|s| format!("{} says {}", s.doc_id, s.value))
            .collect::<Vec<_>>()
            .join("; ");
        let note = match &self.resolution {
            Some(r) => format!("resolved to {} by {}", r.chosen_value, r.policy),
            None => UNRESOLVED.to_string(),
        };
        format!("- {}: {} — {}", self.key, claims, note)
    }

    /// Documents backing the resolved value, if any.
    pub fn resolved_support(&self) -> Option<usize> {
        self.resolution.as_ref().map(|r| r.winning_doc_ids.len())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SynthesizedContext {
    pub fact_lines: Vec<FactLine>,
    pub conflict_lines: Vec<ConflictLine>,
    pub rendered_text: String,
    pub token_count: usize,
    pub dropped_fact_count: usize,
    #[serde(default)]
    pub dropped_conflict_count: usize,
}

impl SynthesizedContext {
    /// Raw text with no structured lines.
    pub fn from_text(text: impl Into<String>) -> Self {
        let rendered_text = text.into();
        Self {
            token_count: tokenize(&rendered_text).len(),
            rendered_text,
            ..Default::default()
        }
    }

    /// Every (key, value) pair the context states.
    pub fn stated_pairs(&self) -> Vec<(String, String)> {
        let facts = self.fact_lines.iter().map(|f| (f.key.clone(), f.value.clone()));
        let conflicts = self
            .conflict_lines
            .iter()
            .flat_map(|c| c.per_source.iter().map(|s| (c.key.clone(), s.value.clone())));
        facts.chain(conflicts).collect()
    }
}

fn render_sections(fact_header: &str, facts: &[FactLine], conflicts: &[ConflictLine]) -> String {
    let mut lines = Vec::new();
    if !facts.is_empty() {
        lines.push(fact_header.to_string());
        lines.extend(facts.iter().map(FactLine::render));
    }
    if !conflicts.is_empty() {
        lines.push(CONFLICTS_HEADER.to_string());
        lines.extend(conflicts.iter().map(ConflictLine::render));
    }
    lines.join("\n")
}

fn assemble(fact_header: &str, fact_lines: Vec<FactLine>, conflict_lines: Vec<ConflictLine>) -> SynthesizedContext {
    let rendered_text = render_sections(fact_header, &fact_lines, &conflict_lines);
    SynthesizedContext {
        token_count: tokenize(&rendered_text).len(),
        rendered_text,
        fact_lines,
        conflict_lines,
        dropped_fact_count: 0,
        dropped_conflict_count: 0,
    }
}

fn group_relevance(group: &ClaimGroup, question_tokens: &std::collections::BTreeSet<String>) -> f64 {
    let from_claims = group.max_relevance();
    if from_claims > 0.0 {
        from_claims
    } else {
        key_relevance(question_tokens, &group.key).unwrap_or(0.0)
    }
}

fn fact_line(group: &ClaimGroup, relevance: f64) -> FactLine {
    FactLine {
        key: group.key.clone(),
        value: group.distinct_values[0].clone(),
        source_doc_ids: group.doc_ids(),
        support: group.support,
        relevance,
        order: 0,
    }
}

fn conflict_line(group: &ClaimGroup, relevance: f64) -> ConflictLine {
    let mut per_source: Vec<SourceValue> = group
        .claims
        .iter()
        .map(|c| SourceValue {
            doc_id: c.doc_id.clone(),
            value: c.value.clone(),
        })
        .collect();
    per_source.dedup();
    ConflictLine {
        key: group.key.clone(),
        per_source,
        resolution: group.resolution.clone(),
        relevance,
        order: 0,
    }
}

/// Renders `report` under a hard token budget.
///
/// Fact lines are ranked by (support desc, relevance desc, key asc) and
/// conflict lines by (relevance desc, key asc). While over budget, the
/// lowest-ranked fact line is dropped; conflict lines are dropped only once
/// no fact line is left.
pub fn synthesize(
    question: &QuestionRecord,
    report: &ConsistencyReport,
    budget: usize,
) -> Result<SynthesizedContext, SynthesisError> {
    if budget < MIN_BUDGET {
        return Err(SynthesisError::BudgetTooSmall {
            budget,
            needed: MIN_BUDGET,
        });
    }
    let q_tokens = content_tokens(&question.question);
    let mut facts: Vec<FactLine> = report
        .consistent_groups
        .iter()
        .map(|g| fact_line(g, group_relevance(g, &q_tokens)))
        .collect();
    facts.sort_by(|a, b| {
        b.support
            .cmp(&a.support)
            .then_with(|| b.relevance.total_cmp(&a.relevance))
            .then_with(|| a.key.cmp(&b.key))
    });
    let mut conflicts: Vec<ConflictLine> = report
        .conflict_groups
        .iter()
        .map(|g| conflict_line(g, group_relevance(g, &q_tokens)))
        .collect();
    conflicts.sort_by(|a, b| b.relevance.total_cmp(&a.relevance).then_with(|| a.key.cmp(&b.key)));

    let fact_tokens: Vec<usize> = facts.iter().map(|f| tokenize(&f.render()).len()).collect();
    let conflict_tokens: Vec<usize> = conflicts.iter().map(|c| tokenize(&c.render()).len()).collect();
    let header_facts = tokenize(FACTS_HEADER).len();
    let header_conflicts = tokenize(CONFLICTS_HEADER).len();
    let total = |nf: usize, nc: usize| -> usize {
        let f: usize = fact_tokens[..nf].iter().sum();
        let c: usize = conflict_tokens[..nc].iter().sum();
        f + c + if nf > 0 { header_facts } else { 0 } + if nc > 0 { header_conflicts } else { 0 }
    };

    let (mut nf, mut nc) = (facts.len(), conflicts.len());
    while total(nf, nc) > budget {
        if nf + nc <= 1 {
            return Err(SynthesisError::BudgetTooSmall {
                budget,
                needed: total(nf, nc),
            });
        }
        if nf > 0 {
            nf -= 1;
        } else {
            nc -= 1;
        }
    }
    let dropped_fact_count = facts.len() - nf;
    let dropped_conflict_count = conflicts.len() - nc;
    facts.truncate(nf);
    conflicts.truncate(nc);
    for (i, f) in facts.iter_mut().enumerate() {
        f.order = i;
    }
    for (i, c) in conflicts.iter_mut().enumerate() {
        c.order = i;
    }
    let mut ctx = assemble(FACTS_HEADER, facts, conflicts);
    debug_assert_eq!(ctx.token_count, total(nf, nc));
    ctx.dropped_fact_count = dropped_fact_count;
    ctx.dropped_conflict_count = dropped_conflict_count;
    Ok(ctx)
}

/// Groups rendered in report order (key ascending), conflicts after facts,
/// with no budget.
pub fn render_unbudgeted(report: &ConsistencyReport) -> SynthesizedContext {
    let mut facts: Vec<FactLine> = report
        .consistent_groups
        .iter()
        .map(|g| fact_line(g, g.max_relevance()))
        .collect();
    let mut conflicts: Vec<ConflictLine> = report
        .conflict_groups
        .iter()
        .map(|g| conflict_line(g, g.max_relevance()))
        .collect();
    for (i, f) in facts.iter_mut().enumerate() {
        f.order = i;
    }
    for (i, c) in conflicts.iter_mut().enumerate() {
        c.order = i;
    }
    assemble(FACTS_HEADER, facts, conflicts)
}

/// Per-claim fact lines (`support=1`) in the given order, without grouping.
pub fn claim_lines(claims: &[Claim]) -> Vec<FactLine> {
    claims
        .iter()
        .enumerate()
        .map(|(i, c)| FactLine {
            key: c.key.clone(),
            value: c.value.clone(),
            source_doc_ids: vec![c.doc_id.clone()],
            support: 1,
            relevance: c.query_relevance,
            order: i,
        })
        .collect()
}

/// One line per claim under an `EXTRACTED FACTS:` header, no budget.
pub fn render_claims(claims: &[Claim]) -> SynthesizedContext {
    assemble(EXTRACTED_HEADER, claim_lines(claims), Vec::new())
}

/// Retrieved documents as `title\ntext`, in rank order, separated by a blank
/// line. No budget is applied.
pub fn render_passthrough(retrieved: &RetrievedSet, corpus: &Corpus) -> SynthesizedContext {
    let blocks: Vec<String> = retrieved
        .doc_ids()
        .filter_map(|id| corpus.get(id))
        .map(|d| {
            if d.title.is_empty() {
                d.text.clone()
            } else {
                format!("{}\n{}", d.title, d.text)
            }
        })
        .collect();
    SynthesizedContext::from_text(blocks.join("\n\n"))
}
