//! Sparse retrieval: an inverted index over a [`Corpus`] and Okapi BM25
//! top-K selection.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tokenize, Corpus, QuestionRecord};

/// Version of the persisted index layout.
pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("unknown document {0:?}")]
    UnknownDoc(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("index file {path}: {detail}")]
    Persist { path: String, detail: String },
    #[error("invalid index: {0}")]
    InvalidIndex(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc_id: String,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Index {
    pub format_version: u32,
    pub doc_count: usize,
    pub avg_doc_length: f64,
    pub doc_lengths: BTreeMap<String, usize>,
    /// Postings per term, sorted by `doc_id`.
    pub postings: BTreeMap<String, Vec<Posting>>,
}

pub fn build_index(corpus: &Corpus) -> Result<Index, RetrievalError> {
    if corpus.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let mut doc_lengths = BTreeMap::new();
    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    for doc in corpus.iter() {
        let tokens = tokenize(&doc.text);
        doc_lengths.insert(doc.id.clone(), tokens.len());
        let mut counts: BTreeMap<String, u32> = BTreeMap::new();
        for token in tokens {
            *counts.entry(token).or_default() += 1;
        }
        for (term, tf) in counts {
            postings.entry(term).or_default().push(Posting {
                doc_id: doc.id.clone(),
                tf,
            });
        }
    }
    for list in postings.values_mut() {
        list.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    }
    let total: usize = doc_lengths.values().sum();
    Ok(Index {
        format_version: INDEX_FORMAT_VERSION,
        doc_count: doc_lengths.len(),
        avg_doc_length: total as f64 / doc_lengths.len() as f64,
        doc_lengths,
        postings,
    })
}

impl Index {
    fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    fn term_freq(&self, term: &str, doc_id: &str) -> u32 {
        self.postings
            .get(term)
            .and_then(|list| {
                list.binary_search_by(|p| p.doc_id.as_str().cmp(doc_id))
                    .ok()
                    .map(|i| list[i].tf)
            })
            .unwrap_or(0)
    }

    fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, params: Bm25Params, idf: f64, tf: u32, doc_len: usize) -> f64 {
        if tf == 0 {
            return 0.0;
        }
        let tf = tf as f64;
        let norm = 1.0 - params.b + params.b * doc_len as f64 / self.avg_doc_length;
        idf * tf * (params.k1 + 1.0) / (tf + params.k1 * norm)
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        let invalid = |msg: String| Err(RetrievalError::InvalidIndex(msg));
        if self.format_version != INDEX_FORMAT_VERSION {
            return invalid(format!(
                "format_version {} (expected {INDEX_FORMAT_VERSION})",
                self.format_version
            ));
        }
        if self.doc_count != self.doc_lengths.len() || self.doc_count == 0 {
            return invalid("doc_count does not match doc_lengths".into());
        }
        let mean = self.doc_lengths.values().sum::<usize>() as f64 / self.doc_count as f64;
        if (mean - self.avg_doc_length).abs() > 1e-9 * mean.abs().max(1.0) {
            return invalid("avg_doc_length is not the mean document length".into());
        }
        for (term, list) in &self.postings {
            if list.windows(2).any(|w| w[0].doc_id >= w[1].doc_id) {
                return invalid(format!("postings for {term:?} not sorted by doc_id"));
            }
            if let Some(p) = list.iter().find(|p| !self.doc_lengths.contains_key(&p.doc_id)) {
                return invalid(format!("posting references unknown doc {:?}", p.doc_id));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("index serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, RetrievalError> {
        let index: Index =
            serde_json::from_str(s).map_err(|e| RetrievalError::InvalidIndex(e.to_string()))?;
        index.validate()?;
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| RetrievalError::Persist {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| RetrievalError::Persist {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::from_json(&raw)
    }
}

/// BM25 score of one document. Repeated query tokens contribute once per
/// occurrence.
pub fn bm25_score(
    index: &Index,
    params: Bm25Params,
    query_tokens: &[String],
    doc_id: &str,
) -> Result<f64, RetrievalError> {
    let doc_len = *index
        .doc_lengths
        .get(doc_id)
        .ok_or_else(|| RetrievalError::UnknownDoc(doc_id.to_string()))?;
    Ok(query_tokens
        .iter()
        .map(|t| index.term_weight(params, index.idf(t), index.term_freq(t, doc_id), doc_len))
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDoc {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSet {
    pub query_id: String,
    /// Sorted by score descending, then `doc_id` ascending.
    pub docs: Vec<RankedDoc>,
    pub k_requested: usize,
}

impl RetrievedSet {
    pub fn empty(query_id: impl Into<String>, k_requested: usize) -> Self {
        Self {
            query_id: query_id.into(),
            docs: Vec::new(),
            k_requested,
        }
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.docs.iter().map(|d| d.doc_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

/// Top-`k` positive-score documents for a raw query string.
pub fn search(
    index: &Index,
    params: Bm25Params,
    query_id: &str,
    query: &str,
    k: usize,
) -> Result<RetrievedSet, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    if index.doc_count == 0 {
        return Err(RetrievalError::EmptyCorpus);
    }
    let tokens = tokenize(query);
    let mut scores: HashMap<&str, f64> = HashMap::new();
    // Term-at-a-time, in query order, so each document's sum is accumulated
    // in the same order as `bm25_score`.
    for term in tokens.iter() {
        let Some(list) = index.postings.get(term) else {
            continue;
        };
        let idf = index.idf(term);
        for p in list {
            let len = index.doc_lengths[&p.doc_id];
            *scores.entry(p.doc_id.as_str()).or_insert(0.0) +=
                index.term_weight(params, idf, p.tf, len);
        }
    }
    let mut docs: Vec<RankedDoc> = scores
        .into_iter()
        .filter(|(_, s)| *s > 0.0)
        .map(|(id, score)| RankedDoc {
            doc_id: id.to_string(),
            score,
        })
        .collect();
    docs.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id)));
    docs.truncate(k);
    Ok(RetrievedSet {
        query_id: query_id.to_string(),
        docs,
        k_requested: k,
    })
}

pub fn retrieve_top_k(
    index: &Index,
    params: Bm25Params,
    question: &QuestionRecord,
    k: usize,
) -> Result<RetrievedSet, RetrievalError> {
    search(index, params, &question.id, &question.question, k)
}

/// Anything that can produce a ranked document set for a question.
/// Dense retrievers plug in here; only BM25 ships.
pub trait Retriever: Send + Sync {
    fn retrieve(&self, question: &QuestionRecord, k: usize) -> Result<RetrievedSet, RetrievalError>;
}

#[derive(Debug, Clone)]
pub struct Bm25Retriever {
    pub index: Index,
    pub params: Bm25Params,
}

impl Retriever for Bm25Retriever {
    fn retrieve(&self, question: &QuestionRecord, k: usize) -> Result<RetrievedSet, RetrievalError> {
        retrieve_top_k(&self.index, self.params, question, k)
    }
}
