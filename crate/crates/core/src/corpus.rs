//! Documents, QA records and the text-normalization rules shared by every
//! other stage.
//!
//! Two normalizers live here: [`tokenize`] (BM25 term counts, F1 overlap,
//! token budgets) and [`normalize_value`] (the comparison key for claim
//! values).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::ops::Deref;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed line {line_no}: {detail}")]
    MalformedLine { line_no: usize, detail: String },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("document {0:?} has empty text")]
    EmptyText(String),
    #[error("record on line {0} has an empty id")]
    EmptyId(usize),
    #[error("question {0:?} has no gold answers")]
    MissingAnswers(String),
    #[error("question {question:?} references unknown document {doc_id:?}")]
    UnknownDoc { question: String, doc_id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Abstract,
    Report,
    Blog,
    #[default]
    Other,
}

/// Timestamps accept RFC 3339, `YYYY-MM-DDTHH:MM:SS` and `YYYY-MM-DD`
/// (naive forms are read as UTC) and are written back as RFC 3339.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(pub DateTime<Utc>);

impl Timestamp {
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
            return Some(Self(dt.with_timezone(&Utc)));
        }
        if let Ok(naive) = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S") {
            return Some(Self(naive.and_utc()));
        }
        NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .ok()
            .and_then(|d| d.and_hms_opt(0, 0, 0))
            .map(|naive| Self(naive.and_utc()))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        Timestamp::parse(&raw)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid ISO-8601 timestamp {raw:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
    #[serde(default)]
    pub source_kind: SourceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

/// Documents keyed by id, iterated in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    docs: IndexMap<String, Document>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_documents<I>(docs: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = Document>,
    {
        let mut corpus = Self::new();
        for (i, doc) in docs.into_iter().enumerate() {
            corpus.insert(doc, i + 1)?;
        }
        Ok(corpus)
    }

    fn insert(&mut self, doc: Document, line_no: usize) -> Result<(), CorpusError> {
        if doc.id.is_empty() {
            return Err(CorpusError::EmptyId(line_no));
        }
        if doc.text.trim().is_empty() {
            return Err(CorpusError::EmptyText(doc.id));
        }
        if self.docs.contains_key(&doc.id) {
            return Err(CorpusError::DuplicateId(doc.id));
        }
        self.docs.insert(doc.id.clone(), doc);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.docs.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.docs.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Document> {
        self.docs.values()
    }

    /// One JSON object per line, in insertion order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for doc in self.iter() {
            out.push_str(&serde_json::to_string(doc).expect("document serializes"));
            out.push('\n');
        }
        out
    }
}

fn read_lines(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_corpus(content: &str) -> Result<Corpus, CorpusError> {
    let mut corpus = Corpus::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(line).map_err(|e| CorpusError::MalformedLine {
            line_no: idx + 1,
            detail: e.to_string(),
        })?;
        corpus.insert(doc, idx + 1)?;
    }
    Ok(corpus)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    parse_corpus(&read_lines(path.as_ref())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionRecord {
    pub id: String,
    pub question: String,
    #[serde(rename = "answers")]
    pub gold_answers: Vec<String>,
    #[serde(default)]
    pub doc_ids: Vec<String>,
    #[serde(default)]
    pub conflict_keys: Vec<String>,
}

impl QuestionRecord {
    /// Checks that every referenced document exists in `corpus`.
    pub fn bind(&self, corpus: &Corpus) -> Result<(), CorpusError> {
        match self.doc_ids.iter().find(|id| !corpus.contains(id)) {
            Some(missing) => Err(CorpusError::UnknownDoc {
                question: self.id.clone(),
                doc_id: missing.clone(),
            }),
            None => Ok(()),
        }
    }
}

pub fn parse_dataset(content: &str) -> Result<Vec<QuestionRecord>, CorpusError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: QuestionRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::MalformedLine {
                line_no: idx + 1,
                detail: e.to_string(),
            })?;
        if record.id.is_empty() {
            return Err(CorpusError::EmptyId(idx + 1));
        }
        if record.gold_answers.is_empty() {
            return Err(CorpusError::MissingAnswers(record.id));
        }
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId(record.id));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<QuestionRecord>, CorpusError> {
    parse_dataset(&read_lines(path.as_ref())?)
}

pub fn dataset_to_jsonl(records: &[QuestionRecord]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Lowercase tokens made of Unicode letters and digits.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenList(Vec<String>);

impl TokenList {
    pub fn into_inner(self) -> Vec<String> {
        self.0
    }

    pub fn join(&self) -> String {
        self.0.join(" ")
    }
}

impl Deref for TokenList {
    type Target = [String];

    fn deref(&self) -> &[String] {
        &self.0
    }
}

impl IntoIterator for TokenList {
    type Item = String;
    type IntoIter = std::vec::IntoIter<String>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.into_iter()
    }
}

/// Splits on every character that is not a letter or digit and lowercases
/// what remains. Lowercase expansions that are not themselves alphanumeric
/// (e.g. the combining dot of `İ`) are dropped so the output is a fixed
/// point of the tokenizer.
pub fn tokenize(text: &str) -> TokenList {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase().filter(|l| is_token_char(*l)));
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    TokenList(tokens)
}

fn is_token_char(c: char) -> bool {
    c.is_alphanumeric() && c.to_lowercase().eq(std::iter::once(c))
}

const TRAILING_PUNCT: &[char] = &['.', ',', ';', ':'];

/// Canonical comparison form for claim values.
///
/// Lowercases, collapses whitespace, strips trailing `. , ; :` and rewrites
/// every whitespace-separated decimal number in canonical form (`045.50`
/// becomes `45.5`, `45.0` becomes `45`).
pub fn normalize_value(text: &str) -> String {
    let lowered = text.to_lowercase();
    let mut s = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let stripped = s.trim_end_matches(TRAILING_PUNCT).trim_end();
        if stripped.len() == s.len() {
            break;
        }
        s = stripped.to_string();
    }
    s.split(' ')
        .map(|word| canonical_decimal(word).unwrap_or_else(|| word.to_string()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `Some(canonical)` when `word` is `[+-]?digits(.digits)?`.
fn canonical_decimal(word: &str) -> Option<String> {
    let (negative, body) = match word.as_bytes().first()? {
        b'-' => (true, &word[1..]),
        b'+' => (false, &word[1..]),
        _ => (false, word),
    };
    let (int_part, frac_part) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    let all_digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    if !all_digits(int_part) || !frac_part.is_none_or(all_digits) {
        return None;
    }
    let int_trimmed = int_part.trim_start_matches('0');
    let int_canon = if int_trimmed.is_empty() { "0" } else { int_trimmed };
    let frac_canon = frac_part.map_or("", |f| f.trim_end_matches('0'));
    let is_zero = int_canon == "0" && frac_canon.is_empty();
    let mut out = String::new();
    if negative && !is_zero {
        out.push('-');
    }
    out.push_str(int_canon);
    if !frac_canon.is_empty() {
        out.push('.');
        out.push_str(frac_canon);
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s).into_inner()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(toks("The CAS module, v2!"), ["the", "cas", "module", "v2"]);
        assert!(toks("").is_empty());
        assert_eq!(toks("45 °C"), ["45", "c"]);
        assert_eq!(toks("Zürich—Ωmega"), ["zürich", "ωmega"]);
    }

    #[test]
    fn normalize_value_examples() {
        assert_eq!(normalize_value("  45.0. "), "45");
        assert_eq!(normalize_value("Gold   Standard"), "gold standard");
        // "45 °C": lowercase -> "45 °c"; "45.0 °C": lowercase, then "45.0" -> "45".
        assert_eq!(normalize_value("45 °C"), "45 °c");
        assert_eq!(normalize_value("45.0 °C"), "45 °c");
        assert_eq!(normalize_value("007.500"), "7.5");
        assert_eq!(normalize_value("-0.0"), "0");
        assert_eq!(normalize_value("+12"), "12");
        assert_eq!(normalize_value("1998;:"), "1998");
        assert_eq!(normalize_value("v1.2.3"), "v1.2.3");
        assert_eq!(normalize_value(""), "");
    }

    #[test]
    fn load_corpus_counts_and_errors() {
        let three = r#"{"id":"d1","title":"a","text":"alpha","source_kind":"abstract"}
{"id":"d2","title":"b","text":"beta","source_kind":"report","timestamp":"2020-01-02"}
{"id":"d3","title":"c","text":"gamma","source_kind":"blog","metadata":{"k":"v"}}
"#;
        let corpus = parse_corpus(three).unwrap();
        assert_eq!(corpus.len(), 3);
        let ids: Vec<_> = corpus.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["d1", "d2", "d3"]);
        assert_eq!(
            corpus.get("d2").unwrap().timestamp.unwrap().to_string(),
            "2020-01-02T00:00:00Z"
        );

        let dup = r#"{"id":"d1","text":"a"}
{"id":"d2","text":"b"}
{"id":"d3","text":"c"}
{"id":"d1","text":"d"}"#;
        assert!(matches!(parse_corpus(dup), Err(CorpusError::DuplicateId(id)) if id == "d1"));

        assert!(parse_corpus("").unwrap().is_empty());

        let empty_text = r#"{"id":"d1","text":"   "}"#;
        assert!(matches!(parse_corpus(empty_text), Err(CorpusError::EmptyText(id)) if id == "d1"));

        let bad = "{\"id\":\"d1\",\"text\":\"a\"}\nnot json";
        assert!(matches!(
            parse_corpus(bad),
            Err(CorpusError::MalformedLine { line_no: 2, .. })
        ));

        let bad_kind = r#"{"id":"d1","text":"a","source_kind":"tweet"}"#;
        assert!(matches!(
            parse_corpus(bad_kind),
            Err(CorpusError::MalformedLine { line_no: 1, .. })
        ));
    }

    #[test]
    fn load_dataset_examples() {
        let ok = r#"{"id":"q1","question":"What?","answers":["45 °C"],"doc_ids":["d1"]}"#;
        let records = parse_dataset(ok).unwrap();
        assert_eq!(records[0].gold_answers, ["45 °C"]);
        assert!(records[0].conflict_keys.is_empty());

        let missing = r#"{"id":"q1","question":"What?","answers":[],"doc_ids":["d1"]}"#;
        assert!(matches!(parse_dataset(missing), Err(CorpusError::MissingAnswers(id)) if id == "q1"));

        let corpus = parse_corpus(r#"{"id":"d1","text":"x"}"#).unwrap();
        let unbound = QuestionRecord {
            doc_ids: vec!["d9".into()],
            ..records[0].clone()
        };
        assert!(records[0].bind(&corpus).is_ok());
        assert!(matches!(unbound.bind(&corpus), Err(CorpusError::UnknownDoc { .. })));
    }

    #[test]
    fn corpus_roundtrip_is_stable() {
        let src = r#"{"id":"d1","title":"t","text":"x","source_kind":"abstract","timestamp":"2021-05-01T10:00:00+02:00"}"#;
        let once = parse_corpus(src).unwrap().to_jsonl();
        let twice = parse_corpus(&once).unwrap().to_jsonl();
        assert_eq!(once, twice);
    }

    proptest! {
        #[test]
        fn tokenize_is_a_fixed_point(s in "\\PC{0,40}") {
            let once = tokenize(&s);
            prop_assert_eq!(tokenize(&once.join()), once.clone());
            for t in once.iter() {
                prop_assert!(!t.is_empty());
                prop_assert!(t.chars().all(char::is_alphanumeric));
                prop_assert_eq!(t.to_lowercase(), t.clone());
            }
        }

        #[test]
        fn normalize_value_is_idempotent(s in "[ a-zA-Z0-9.,;:+\\-°]{0,30}") {
            let once = normalize_value(&s);
            prop_assert_eq!(normalize_value(&once), once);
        }

        #[test]
        fn normalize_value_idempotent_unicode(s in "\\PC{0,30}") {
            let once = normalize_value(&s);
            prop_assert_eq!(normalize_value(&once), once);
        }
    }
}
