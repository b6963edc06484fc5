#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use casc_core::consistency::{ConsistencyReport, GroupStatus, Policy};
use casc_core::corpus::{tokenize, Corpus, Document, Timestamp};
use casc_core::extract::Claim;
use casc_core::retrieval::{Bm25Params, RankedDoc};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn doc(id: &str, text: &str, timestamp: Option<Timestamp>) -> Document {
    Document {
        id: id.into(),
        title: String::new(),
        text: text.into(),
        source_kind: Default::default(),
        timestamp,
        metadata: Default::default(),
    }
}

// ---------------------------------------------------------------------------
// Consistency oracle

/// One group as the oracle sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleGroup {
    pub key: String,
    pub conflicting: bool,
    pub pairs: BTreeSet<(String, String)>,
    pub values: BTreeSet<String>,
    pub support: usize,
    pub chosen: Option<(String, Vec<String>)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleReport {
    pub groups: Vec<OracleGroup>,
    pub dropped: usize,
}

/// Quadratic reference: every grouping, duplicate and conflict decision is
/// made by comparing claims pairwise.
pub fn oracle(claims: &[Claim], policy: Policy, corpus: &Corpus) -> OracleReport {
    let n = claims.len();
    let mut dropped = 0;
    let mut groups = Vec::new();
    for i in 0..n {
        if (0..i).any(|j| claims[j].key == claims[i].key) {
            continue;
        }
        let members: Vec<usize> = (0..n).filter(|&j| claims[j].key == claims[i].key).collect();
        let mut kept: Vec<usize> = Vec::new();
        for &a in &members {
            let dup = kept
                .iter()
                .any(|&b| claims[a].doc_id == claims[b].doc_id && claims[a].value == claims[b].value);
            if dup {
                dropped += 1;
            } else {
                kept.push(a);
            }
        }
        let conflicting = kept
            .iter()
            .any(|&a| kept.iter().any(|&b| claims[a].value != claims[b].value));
        // Docs per value, counted pairwise.
        let doc_count = |v: &str| {
            kept.iter()
                .filter(|&&a| claims[a].value == v)
                .filter(|&&a| {
                    !kept
                        .iter()
                        .take_while(|&&b| b != a)
                        .any(|&b| claims[b].value == v && claims[b].doc_id == claims[a].doc_id)
                })
                .count()
        };
        let values: BTreeSet<String> = kept.iter().map(|&a| claims[a].value.clone()).collect();
        let support = values.iter().map(|v| doc_count(v)).max().unwrap_or(0);
        let chosen_value = if !conflicting {
            None
        } else {
            match policy {
                Policy::FlagOnly => None,
                Policy::Majority => {
                    let top: Vec<&String> = values.iter().filter(|v| doc_count(v) == support).collect();
                    (top.len() == 1).then(|| top[0].clone())
                }
                Policy::Recency => {
                    let stamps: Vec<Option<Timestamp>> = kept
                        .iter()
                        .map(|&a| corpus.get(&claims[a].doc_id).and_then(|d| d.timestamp))
                        .collect();
                    if stamps.iter().any(Option::is_none) {
                        None
                    } else {
                        let newest = stamps.iter().flatten().max().copied();
                        let newest_values: BTreeSet<&String> = kept
                            .iter()
                            .zip(&stamps)
                            .filter(|(_, t)| **t == newest)
                            .map(|(&a, _)| &claims[a].value)
                            .collect();
                        (newest_values.len() == 1).then(|| newest_values.into_iter().next().unwrap().clone())
                    }
                }
            }
        };
        let chosen = chosen_value.map(|v| {
            let docs: BTreeSet<String> = kept
                .iter()
                .filter(|&&a| claims[a].value == v)
                .map(|&a| claims[a].doc_id.clone())
                .collect();
            (v, docs.into_iter().collect())
        });
        groups.push(OracleGroup {
            key: claims[i].key.clone(),
            conflicting,
            pairs: kept
                .iter()
                .map(|&a| (claims[a].doc_id.clone(), claims[a].value.clone()))
                .collect(),
            values,
            support,
            chosen,
        });
    }
    groups.sort_by(|a, b| a.key.cmp(&b.key));
    OracleReport { groups, dropped }
}

/// Projects a report onto the oracle's view.
pub fn project(report: &ConsistencyReport) -> OracleReport {
    let mut groups: Vec<OracleGroup> = report
        .groups()
        .map(|g| OracleGroup {
            key: g.key.clone(),
            conflicting: g.status == GroupStatus::Conflicting,
            pairs: g.claims.iter().map(|c| (c.doc_id.clone(), c.value.clone())).collect(),
            values: g.distinct_values.iter().cloned().collect(),
            support: g.support,
            chosen: g
                .resolution
                .as_ref()
                .map(|r| (r.chosen_value.clone(), r.winning_doc_ids.clone())),
        })
        .collect();
    groups.sort_by(|a, b| a.key.cmp(&b.key));
    OracleReport {
        groups,
        dropped: report.dropped_duplicates,
    }
}

/// Random claims (≤50, ≤10 keys, ≤8 docs) over a small value pool so ties,
/// duplicates and conflicts are common. Some documents lack timestamps and
/// some share one.
pub fn random_claim_set(rng: &mut impl Rng) -> (Vec<Claim>, Corpus) {
    let n_docs = rng.gen_range(1..=8);
    let n_keys = rng.gen_range(1..=10);
    let n_claims = rng.gen_range(0..=50);
    let stamps = ["2020-01-01", "2021-01-01", "2022-01-01"];
    let docs: Vec<Document> = (0..n_docs)
        .map(|d| {
            let ts = if rng.gen_bool(0.15) {
                None
            } else {
                Timestamp::parse(stamps.choose(rng).unwrap())
            };
            doc(&format!("d{d}"), "x", ts)
        })
        .collect();
    let claims = (0..n_claims)
        .map(|i| {
            let d = rng.gen_range(0..n_docs);
            Claim {
                claim_id: format!("d{d}#{i}"),
                doc_id: format!("d{d}"),
                key: format!("e{}|attr", rng.gen_range(0..n_keys)),
                value: ["1", "2", "3"].choose(rng).unwrap().to_string(),
                raw_span: (i, i + 1),
                query_relevance: rng.gen_range(0..4) as f64 / 4.0,
            }
        })
        .collect();
    (claims, Corpus::from_documents(docs).unwrap())
}

// ---------------------------------------------------------------------------
// Retrieval oracle

/// Scores every document from its raw text, no index involved.
pub fn exhaustive_top_k(corpus: &Corpus, params: Bm25Params, query: &str, k: usize) -> Vec<RankedDoc> {
    let docs: Vec<(String, Vec<String>)> = corpus
        .iter()
        .map(|d| (d.id.clone(), tokenize(&d.text).into_inner()))
        .collect();
    let n = docs.len() as f64;
    let avg = docs.iter().map(|(_, t)| t.len()).sum::<usize>() as f64 / n;
    let q = tokenize(query).into_inner();
    let mut scored: Vec<RankedDoc> = docs
        .iter()
        .map(|(id, toks)| {
            let mut score = 0.0;
            for term in &q {
                let df = docs.iter().filter(|(_, t)| t.contains(term)).count() as f64;
                let tf = toks.iter().filter(|t| *t == term).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                let norm = 1.0 - params.b + params.b * toks.len() as f64 / avg;
                score += idf * tf * (params.k1 + 1.0) / (tf + params.k1 * norm);
            }
            RankedDoc {
                doc_id: id.clone(),
                score,
            }
        })
        .filter(|r| r.score > 0.0)
        .collect();
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id)));
    scored.truncate(k);
    scored
}

const VOCAB: &[&str] = &["alpha", "beta", "gamma", "delta", "omega", "sigma", "kappa", "zeta", "eta", "rho", "tau", "phi"];

pub fn random_corpus(rng: &mut impl Rng) -> Corpus {
    let n = rng.gen_range(1..=50);
    let docs = (0..n).map(|i| {
        let len = rng.gen_range(1..=30);
        let text: Vec<&str> = (0..len).map(|_| *VOCAB.choose(rng).unwrap()).collect();
        doc(&format!("doc{i:02}"), &text.join(" "), None)
    });
    Corpus::from_documents(docs).unwrap()
}

pub fn random_query(rng: &mut impl Rng) -> String {
    let len = rng.gen_range(1..=4);
    (0..len).map(|_| *VOCAB.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

// ---------------------------------------------------------------------------
// Stub chat-completions server

pub struct StubServer {
    pub base_url: String,
    pub requests: Arc<AtomicUsize>,
    pub peak_in_flight: Arc<AtomicUsize>,
    pub bodies: Arc<std::sync::Mutex<Vec<String>>>,
}

pub struct StubReply {
    pub status: u16,
    pub body: String,
    pub delay: Duration,
}

pub fn completion_body(content: &str) -> String {
    serde_json::json!({
        "id": "cmpl-1",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]
    })
    .to_string()
}

fn read_request(stream: &mut TcpStream) -> Option<String> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; content_length];
    reader.read_exact(&mut body).ok()?;
    String::from_utf8(body).ok()
}

impl StubServer {
    /// `reply(n)` decides the response to the n-th request (0-based).
    pub fn start(reply: impl Fn(usize) -> StubReply + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base_url = format!("http://{}/v1", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let in_flight = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(std::sync::Mutex::new(Vec::new()));
        let reply = Arc::new(reply);
        {
            let (requests, peak, bodies) = (requests.clone(), peak.clone(), bodies.clone());
            thread::spawn(move || {
                for stream in listener.incoming() {
                    let Ok(mut stream) = stream else { continue };
                    let (requests, in_flight, peak, bodies, reply) =
                        (requests.clone(), in_flight.clone(), peak.clone(), bodies.clone(), reply.clone());
                    thread::spawn(move || {
                        let Some(body) = read_request(&mut stream) else { return };
                        let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                        peak.fetch_max(now, Ordering::SeqCst);
                        let n = requests.fetch_add(1, Ordering::SeqCst);
                        bodies.lock().unwrap().push(body);
                        let r = reply(n);
                        thread::sleep(r.delay);
                        in_flight.fetch_sub(1, Ordering::SeqCst);
                        let response = format!(
                            "HTTP/1.1 {} STUB\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                            r.status,
                            r.body.len(),
                            r.body
                        );
                        let _ = stream.write_all(response.as_bytes());
                        let _ = stream.flush();
                    });
                }
            });
        }
        Self {
            base_url,
            requests,
            peak_in_flight: peak,
            bodies,
        }
    }
}

pub fn group_by_key(claims: &[Claim]) -> BTreeMap<&str, Vec<&Claim>> {
    let mut m: BTreeMap<&str, Vec<&Claim>> = BTreeMap::new();
    for c in claims {
        m.entry(&c.key).or_default().push(c);
    }
    m
}
