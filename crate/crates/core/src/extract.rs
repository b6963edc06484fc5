//! Query-focused claim extraction.
//!
//! Each retrieved document becomes a list of `entity|attribute = value`
//! claims grounded by a character span. Two backends share one contract:
//! a rule-based extractor over three sentence templates and an LLM-backed
//! extractor whose JSON output is checked against the document text.
//!
//! Rule-based templates (case-insensitive, one claim per sentence):
//!
//! * `the <attribute> of <entity> is|was <value>`
//! * `<entity>'s <attribute> is|was <value>`
//! * `<entity> <attribute> [was|were|is] measured|reported at <value>`
//!
//! For the third form the entity is the longest leading run of subject words
//! that also appears contiguously in the question, or the first word if none
//! does.

use std::collections::BTreeSet;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{normalize_value, tokenize, Corpus, Document, QuestionRecord};
use crate::gateway::{build_extract_prompt, Gateway, PromptTemplates};
use crate::retrieval::RetrievedSet;

const STOPWORDS_DATA: &str = include_str!("../data/stopwords.txt");

pub fn stopwords() -> &'static BTreeSet<&'static str> {
    static WORDS: OnceLock<BTreeSet<&'static str>> = OnceLock::new();
    WORDS.get_or_init(|| {
        STOPWORDS_DATA
            .lines()
            .map(str::trim)
            .filter(|w| !w.is_empty())
            .collect()
    })
}

/// Distinct non-stopword tokens of `text`.
pub fn content_tokens(text: &str) -> BTreeSet<String> {
    let stop = stopwords();
    tokenize(text)
        .into_iter()
        .filter(|t| !stop.contains(t.as_str()))
        .collect()
}

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("extraction backend failed on {doc_id}: {detail}")]
    BackendFailure { doc_id: String, detail: String },
    #[error("no JSON array in extractor output")]
    UnparseableOutput,
    #[error("retrieved document {0:?} is not in the corpus")]
    UnknownDoc(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub claim_id: String,
    pub doc_id: String,
    /// Normalized `entity|attribute`.
    pub key: String,
    /// Normalized value.
    pub value: String,
    /// Character (not byte) offsets into the document text, end exclusive.
    #[serde(rename = "span")]
    pub raw_span: (usize, usize),
    #[serde(rename = "relevance")]
    pub query_relevance: f64,
}

impl Claim {
    /// The document text covered by the span, if the span is in range.
    pub fn span_text<'a>(&self, doc: &'a Document) -> Option<&'a str> {
        char_slice(&doc.text, self.raw_span.0, self.raw_span.1)
    }

    /// The span is non-empty and its normalized text contains the value.
    pub fn is_grounded_in(&self, doc: &Document) -> bool {
        self.doc_id == doc.id
            && self.raw_span.0 < self.raw_span.1
            && self
                .span_text(doc)
                .is_some_and(|s| !self.value.is_empty() && normalize_value(s).contains(&self.value))
    }
}

#[derive(Clone, Default)]
pub enum ExtractorBackend {
    #[default]
    RuleBased,
    Llm {
        gateway: Arc<Gateway>,
        templates: Arc<PromptTemplates>,
    },
}

impl std::fmt::Debug for ExtractorBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExtractorBackend::RuleBased => f.write_str("RuleBased"),
            ExtractorBackend::Llm { gateway, .. } => write!(f, "Llm({gateway:?})"),
        }
    }
}

fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut indices = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let b_start = indices.nth(start)?;
    let b_end = if end == start {
        b_start
    } else {
        indices.nth(end - start - 1)?
    };
    Some(&text[b_start..b_end])
}

fn char_offset(text: &str, byte: usize) -> usize {
    text[..byte].chars().count()
}

/// Byte ranges of sentences: a sentence ends at `.`, `!` or `?` followed by
/// whitespace or end of text. The terminator is excluded.
fn sentences(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let at_boundary = matches!(c, '.' | '!' | '?')
            && chars.peek().is_none_or(|(_, next)| next.is_whitespace());
        if at_boundary {
            push_trimmed(text, start, i, &mut out);
            start = i + c.len_utf8();
        }
    }
    push_trimmed(text, start, text.len(), &mut out);
    out
}

fn push_trimmed(text: &str, start: usize, end: usize, out: &mut Vec<(usize, usize)>) {
    let slice = &text[start..end];
    let lead = slice.len() - slice.trim_start().len();
    let trail = slice.len() - slice.trim_end().len();
    if lead + trail < slice.len() {
        out.push((start + lead, end - trail));
    }
}

struct Patterns {
    copular: Regex,
    possessive: Regex,
    reported: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        copular: Regex::new(r"(?is)^the\s+(?P<attr>.+?)\s+of\s+(?P<ent>.+?)\s+(?:is|was)\s+(?P<val>.+)$")
            .expect("valid regex"),
        possessive: Regex::new(r"(?is)^(?P<ent>.+?)['’]s\s+(?P<attr>.+?)\s+(?:is|was)\s+(?P<val>.+)$")
            .expect("valid regex"),
        reported: Regex::new(
            r"(?is)^(?P<subj>.+?)\s+(?:(?:was|were|is)\s+)?(?:measured|reported)\s+at\s+(?P<val>.+)$",
        )
        .expect("valid regex"),
    })
}

fn strip_article(s: &str) -> &str {
    let s = s.trim();
    for article in ["the ", "a ", "an "] {
        if s.len() > article.len() && s[..article.len()].eq_ignore_ascii_case(article) {
            return s[article.len()..].trim_start();
        }
    }
    s
}

pub fn make_key(entity: &str, attribute: &str) -> String {
    let entity = normalize_value(strip_article(entity));
    let attribute = normalize_value(strip_article(attribute));
    normalize_value(&format!("{entity}|{attribute}"))
}

fn valid_key(key: &str) -> bool {
    key.split_once('|')
        .is_some_and(|(e, a)| !e.trim().is_empty() && !a.trim().is_empty())
}

/// Splits a reported-form subject into (entity, attribute).
fn split_subject<'a>(subject: &'a str, question_tokens: &[String]) -> Option<(&'a str, &'a str)> {
    let words: Vec<(usize, &str)> = subject
        .split_whitespace()
        .map(|w| (w.as_ptr() as usize - subject.as_ptr() as usize, w))
        .collect();
    if words.len() < 2 {
        return None;
    }
    let mut entity_words = 1;
    for n in (1..words.len()).rev() {
        let prefix_end = words[n - 1].0 + words[n - 1].1.len();
        let prefix = tokenize(&subject[..prefix_end]);
        if !prefix.is_empty()
            && question_tokens
                .windows(prefix.len())
                .any(|w| w == &prefix[..])
        {
            entity_words = n;
            break;
        }
    }
    let split = words[entity_words].0;
    Some((subject[..split].trim_end(), &subject[split..]))
}

struct RawClaim {
    key: String,
    value: String,
    span: (usize, usize),
}

fn rule_based_claims(question: &QuestionRecord, doc: &Document) -> Vec<RawClaim> {
    let p = patterns();
    let q_tokens = tokenize(&question.question).into_inner();
    let text = &doc.text;
    let mut out = Vec::new();
    for (s, e) in sentences(text) {
        let sentence = &text[s..e];
        let (key, val) = if let Some(c) = p.copular.captures(sentence) {
            (make_key(&c["ent"], &c["attr"]), c.name("val").expect("group"))
        } else if let Some(c) = p.possessive.captures(sentence) {
            (make_key(&c["ent"], &c["attr"]), c.name("val").expect("group"))
        } else if let Some(c) = p.reported.captures(sentence) {
            match split_subject(&c["subj"], &q_tokens) {
                Some((ent, attr)) => (make_key(ent, attr), c.name("val").expect("group")),
                None => continue,
            }
        } else {
            continue;
        };
        let surface = val.as_str().trim_end();
        let value = normalize_value(surface);
        if value.is_empty() || !valid_key(&key) {
            continue;
        }
        let b_start = s + val.start();
        let b_end = b_start + surface.len();
        out.push(RawClaim {
            key,
            value,
            span: (char_offset(text, b_start), char_offset(text, b_end)),
        });
    }
    out
}

/// Result of checking an LLM response against its document.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmClaims {
    pub claims: Vec<Claim>,
    /// Items dropped because they were malformed or not grounded in the text.
    pub dropped: usize,
}

fn fold(c: char) -> char {
    c.to_lowercase().next().unwrap_or(c)
}

fn find_chars(hay: &[char], needle: &[char], from: usize) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    (from..=hay.len() - needle.len()).find(|&i| hay[i..i + needle.len()] == *needle)
}

/// Char index just past the end of the sentence containing position `at`.
fn sentence_end(chars: &[char], at: usize) -> usize {
    let mut i = at;
    while i < chars.len() {
        if matches!(chars[i], '.' | '!' | '?')
            && chars.get(i + 1).is_none_or(|c| c.is_whitespace())
        {
            return i + 1;
        }
        i += 1;
    }
    chars.len()
}

/// Parses a JSON array of `{key, value, quote}` objects. An item survives
/// when its quote occurs verbatim in the document and its value occurs
/// (case-insensitively) inside the quote or later in the quote's sentence.
/// The span runs from the quote start to the end of whichever ends last.
/// Relevance is left at 0; [`extract`] scores and filters.
pub fn parse_llm_claims(raw: &str, doc: &Document) -> Result<LlmClaims, ExtractError> {
    let items = parse_json_array(raw).ok_or(ExtractError::UnparseableOutput)?;
    let text_chars: Vec<char> = doc.text.chars().collect();
    let folded: Vec<char> = text_chars.iter().copied().map(fold).collect();
    let mut raw_claims = Vec::new();
    let mut dropped = 0;
    for item in items {
        let field = |name: &str| item.get(name).and_then(Value::as_str).map(str::trim);
        let (Some(key), Some(value), Some(quote)) = (field("key"), field("value"), field("quote")) else {
            dropped += 1;
            continue;
        };
        let Some(q_byte) = (!quote.is_empty()).then(|| doc.text.find(quote)).flatten() else {
            dropped += 1;
            continue;
        };
        let q_start = char_offset(&doc.text, q_byte);
        let q_end = q_start + quote.chars().count();
        let surface = value.trim_end_matches(['.', ',', ';', ':']).trim_end();
        let needle: Vec<char> = surface.chars().map(fold).collect();
        let limit = sentence_end(&text_chars, q_end.saturating_sub(1).max(q_start));
        let found = find_chars(&folded, &needle, q_start).filter(|&v| v < limit);
        let Some(v_start) = found else {
            dropped += 1;
            continue;
        };
        let key = match key.split_once('|') {
            Some((e, a)) => make_key(e, a),
            None => String::new(),
        };
        let claim = RawClaim {
            key,
            value: normalize_value(surface),
            span: (q_start, q_end.max(v_start + needle.len())),
        };
        let probe = finish(doc, 0, claim, 0.0);
        if !valid_key(&probe.key) || !probe.is_grounded_in(doc) {
            dropped += 1;
            continue;
        }
        raw_claims.push(probe);
    }
    raw_claims.sort_by_key(|c| c.raw_span);
    for (i, c) in raw_claims.iter_mut().enumerate() {
        c.claim_id = format!("{}#{i}", doc.id);
    }
    Ok(LlmClaims {
        claims: raw_claims,
        dropped,
    })
}

fn parse_json_array(raw: &str) -> Option<Vec<serde_json::Map<String, Value>>> {
    let start = raw.find('[')?;
    let end = raw.rfind(']')?;
    if end < start {
        return None;
    }
    let values: Vec<Value> = serde_json::from_str(&raw[start..=end]).ok()?;
    Some(
        values
            .into_iter()
            .map(|v| match v {
                Value::Object(map) => map,
                _ => serde_json::Map::new(),
            })
            .collect(),
    )
}

fn finish(doc: &Document, idx: usize, raw: RawClaim, relevance: f64) -> Claim {
    Claim {
        claim_id: format!("{}#{idx}", doc.id),
        doc_id: doc.id.clone(),
        key: raw.key,
        value: raw.value,
        raw_span: raw.span,
        query_relevance: relevance,
    }
}

/// Jaccard overlap of non-stopword tokens, or `None` when they share none.
pub fn key_relevance(question_tokens: &BTreeSet<String>, key: &str) -> Option<f64> {
    let key_tokens = content_tokens(key);
    let shared = key_tokens.intersection(question_tokens).count();
    if shared == 0 {
        return None;
    }
    let union = key_tokens.union(question_tokens).count();
    Some(shared as f64 / union as f64)
}

fn relevant(question: &QuestionRecord, doc: &Document, claims: Vec<(String, String, (usize, usize))>) -> Vec<Claim> {
    let q_tokens = content_tokens(&question.question);
    let mut kept: Vec<(RawClaim, f64)> = claims
        .into_iter()
        .filter_map(|(key, value, span)| {
            key_relevance(&q_tokens, &key).map(|r| (RawClaim { key, value, span }, r))
        })
        .collect();
    kept.sort_by(|a, b| a.0.span.cmp(&b.0.span).then_with(|| a.0.key.cmp(&b.0.key)));
    kept.into_iter()
        .enumerate()
        .map(|(i, (raw, r))| finish(doc, i, raw, r))
        .collect()
}

/// Query-relevant claims of one document, ordered by span start.
pub fn extract(
    question: &QuestionRecord,
    doc: &Document,
    backend: &ExtractorBackend,
) -> Result<Vec<Claim>, ExtractError> {
    let found: Vec<(String, String, (usize, usize))> = match backend {
        ExtractorBackend::RuleBased => rule_based_claims(question, doc)
            .into_iter()
            .map(|c| (c.key, c.value, c.span))
            .collect(),
        ExtractorBackend::Llm { gateway, templates } => {
            let request = build_extract_prompt(templates, gateway.model(), question, doc);
            let raw = gateway.complete(&request).map_err(|e| ExtractError::BackendFailure {
                doc_id: doc.id.clone(),
                detail: e.to_string(),
            })?;
            let parsed = parse_llm_claims(&raw, doc).map_err(|e| ExtractError::BackendFailure {
                doc_id: doc.id.clone(),
                detail: e.to_string(),
            })?;
            parsed
                .claims
                .into_iter()
                .map(|c| (c.key, c.value, c.raw_span))
                .collect()
        }
    };
    Ok(relevant(question, doc, found))
}

/// Per-document extractions concatenated in retrieval-rank order.
pub fn extract_all(
    question: &QuestionRecord,
    retrieved: &RetrievedSet,
    corpus: &Corpus,
    backend: &ExtractorBackend,
) -> Result<Vec<Claim>, ExtractError> {
    let docs = retrieved
        .doc_ids()
        .map(|id| corpus.get(id).ok_or_else(|| ExtractError::UnknownDoc(id.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let per_doc: Vec<Vec<Claim>> = match backend {
        ExtractorBackend::RuleBased => docs
            .iter()
            .map(|d| extract(question, d, backend))
            .collect::<Result<_, _>>()?,
        ExtractorBackend::Llm { .. } => docs
            .par_iter()
            .map(|d| extract(question, d, backend))
            .collect::<Result<_, _>>()?,
    };
    Ok(per_doc.into_iter().flatten().collect())
}
