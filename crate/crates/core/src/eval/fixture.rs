//! Seeded synthetic QA fixtures with planted redundancy and conflicts.
//!
//! Each question asks for one attribute of a made-up entity. Its documents
//! are a primary document stating the true value, optionally a redundant
//! document restating it in another pattern, optionally a short distractor
//! asserting a wrong value, and background documents that mention the entity
//! without stating any fact. Every value in a fixture is unique, so a value
//! identifies the fact it came from.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use chrono::{Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{dataset_to_jsonl, normalize_value, tokenize, Corpus, Document, QuestionRecord, SourceKind, Timestamp};
use crate::extract::{make_key, stopwords};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("invalid fixture spec: {0}")]
    InvalidSpec(String),
    #[error("cannot write {path}: {detail}")]
    Io { path: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSpec {
    pub n_questions: usize,
    /// Inclusive `[min, max]`, both within 3..=5.
    pub docs_per_question: (usize, usize),
    pub redundancy_rate: f64,
    pub conflict_rate: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            n_questions: 200,
            docs_per_question: (3, 5),
            redundancy_rate: 0.5,
            conflict_rate: 0.5,
            seed: 7,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<(), FixtureError> {
        let (lo, hi) = self.docs_per_question;
        if !(3..=5).contains(&lo) || !(3..=5).contains(&hi) || lo > hi {
            return Err(FixtureError::InvalidSpec(format!("docs_per_question {lo}..{hi} outside 3..5")));
        }
        for (name, rate) in [("redundancy_rate", self.redundancy_rate), ("conflict_rate", self.conflict_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(FixtureError::InvalidSpec(format!("{name} {rate} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerKeyEntry {
    pub question_id: String,
    pub key: String,
    pub true_value: String,
    pub distractor_value: Option<String>,
    /// A value of the right kind that no document contains.
    pub unsupported_value: String,
    pub redundant: bool,
    pub conflict: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub corpus: Corpus,
    pub dataset: Vec<QuestionRecord>,
    pub answer_key: Vec<AnswerKeyEntry>,
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const ANSWER_KEY_FILE: &str = "answer_key.jsonl";
pub const CONFIG_FILE: &str = "config.json";

impl Fixture {
    pub fn answer_key_jsonl(&self) -> String {
        self.answer_key
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
            .collect()
    }

    /// Writes corpus, dataset, answer key and a ready-to-run config into
    /// `dir`. The config uses majority resolution.
    pub fn write_to(&self, dir: &Path) -> Result<(), FixtureError> {
        let write = |name: &str, body: String| {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| FixtureError::Io {
                path: path.display().to_string(),
                detail: e.to_string(),
            })
        };
        fs::create_dir_all(dir).map_err(|e| FixtureError::Io {
            path: dir.display().to_string(),
            detail: e.to_string(),
        })?;
        write(CORPUS_FILE, self.corpus.to_jsonl())?;
        write(DATASET_FILE, dataset_to_jsonl(&self.dataset))?;
        write(ANSWER_KEY_FILE, self.answer_key_jsonl())?;
        let config = serde_json::json!({
            "cas": { "policy": "majority" },
            "paths": { "corpus": CORPUS_FILE, "dataset": DATASET_FILE, "output": "reports" }
        });
        write(CONFIG_FILE, serde_json::to_string_pretty(&config).expect("json") + "\n")
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Quantity,
    Year,
    Name,
}

const ATTRIBUTES: &[(&str, Kind)] = &[
    ("melting point", Kind::Quantity),
    ("boiling point", Kind::Quantity),
    ("elevation", Kind::Quantity),
    ("population", Kind::Quantity),
    ("catalog number", Kind::Quantity),
    ("founding year", Kind::Year),
    ("discovery year", Kind::Year),
    ("survey year", Kind::Year),
    ("chief architect", Kind::Name),
    ("founder", Kind::Name),
    ("patron", Kind::Name),
];

const PRIMARY_FILLER: &[&str] = &[
    "{e} lies within a region known for careful record keeping.",
    "Several expeditions visited {e} during the last century.",
    "Local archives hold many letters describing {e}.",
    "Visitors often remark on the quiet character of {e}.",
    "Historians continue to debate minor details about {e}.",
];

const BACKGROUND_FILLER: &[&str] = &[
    "{e} appears in several regional surveys.",
    "A short note about {e} mentions its long history.",
    "Travel guides rarely describe {e} in depth.",
    "Scholars have compared {e} with neighbouring sites.",
    "Old maps mark {e} with a small symbol.",
];

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mer", "vin", "dra", "sul", "tor", "bel", "quen", "zar", "ith", "nor", "pel", "rus", "vay",
    "osk", "tam", "gri", "hol", "jun",
];

#[derive(Clone, Copy, Debug, PartialEq)]
enum Pattern {
    Copular,
    Possessive,
    Reported,
}

fn fact_sentence(pattern: Pattern, entity: &str, attribute: &str, value: &str) -> String {
    match pattern {
        Pattern::Copular => format!("The {attribute} of {entity} is {value}."),
        Pattern::Possessive => format!("{entity}'s {attribute} is {value}."),
        Pattern::Reported => format!("{entity} {attribute} was measured at {value}."),
    }
}

fn patterns_for(kind: Kind) -> &'static [Pattern] {
    match kind {
        Kind::Quantity => &[Pattern::Copular, Pattern::Possessive, Pattern::Reported],
        _ => &[Pattern::Copular, Pattern::Possessive],
    }
}

fn fill(template: &str, entity: &str) -> String {
    template.replace("{e}", entity)
}

struct Generator {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Generator {
    fn new(seed: u64) -> Self {
        let mut used: HashSet<String> = stopwords().iter().map(|s| s.to_string()).collect();
        let vocabulary = PRIMARY_FILLER
            .iter()
            .chain(BACKGROUND_FILLER)
            .copied()
            .chain(ATTRIBUTES.iter().map(|(a, _)| *a))
            .chain(["measured", "reported", "readers", "often", "ask", "some", "sources", "list", "different", "for", "differ", "notes", "has", "drawn", "steady", "scholarly", "attention", "insufficient", "information"]);
        for text in vocabulary {
            used.extend(tokenize(text).into_inner());
        }
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            used,
        }
    }

    fn word(&mut self) -> String {
        loop {
            let n = self.rng.gen_range(2..=3);
            let w: String = (0..n).map(|_| *SYLLABLES.choose(&mut self.rng).expect("syllables")).collect();
            if self.used.insert(w.clone()) {
                let mut chars = w.chars();
                let first = chars.next().expect("non-empty").to_uppercase();
                return first.chain(chars).collect();
            }
        }
    }

    fn value(&mut self, kind: Kind) -> String {
        match kind {
            Kind::Name => self.word(),
            Kind::Quantity | Kind::Year => loop {
                let v = match kind {
                    Kind::Year => self.rng.gen_range(1500..2000).to_string(),
                    _ => self.rng.gen_range(100..100_000).to_string(),
                };
                if self.used.insert(v.clone()) {
                    return v;
                }
            },
        }
    }

    fn pick<T: Copy>(&mut self, items: &[T]) -> T {
        *items.choose(&mut self.rng).expect("non-empty")
    }

    fn timestamp(&mut self) -> Timestamp {
        let base = Utc.with_ymd_and_hms(2015, 1, 1, 0, 0, 0).single().expect("valid date");
        Timestamp(base + Duration::days(self.rng.gen_range(0..3000)))
    }
}

fn doc(id: String, title: &str, sentences: &[String], timestamp: Timestamp, kind: SourceKind) -> Document {
    Document {
        id,
        title: title.to_string(),
        text: sentences.join(" "),
        source_kind: kind,
        timestamp: Some(timestamp),
        metadata: BTreeMap::new(),
    }
}

/// Byte-identical output for identical specs.
pub fn generate_fixture(spec: &FixtureSpec) -> Result<Fixture, FixtureError> {
    spec.validate()?;
    let mut g = Generator::new(spec.seed);
    let mut docs = Vec::new();
    let mut dataset = Vec::new();
    let mut answer_key = Vec::new();

    for qi in 0..spec.n_questions {
        let qid = format!("q{qi:04}");
        let entity = g.word();
        let (attribute, kind) = g.pick(ATTRIBUTES);
        let side = loop {
            let s = g.pick(ATTRIBUTES);
            if s.0 != attribute {
                break s;
            }
        };
        let true_value = g.value(kind);
        let side_value = g.value(side.1);
        let unsupported = g.value(kind);

        let n_docs = g.rng.gen_range(spec.docs_per_question.0..=spec.docs_per_question.1);
        let redundant = g.rng.gen_bool(spec.redundancy_rate);
        let conflict = g.rng.gen_bool(spec.conflict_rate);
        let distractor_value = conflict.then(|| g.value(kind));

        let mut qdocs: Vec<Document> = Vec::new();
        let mut next_id = {
            let mut n = 0;
            let qid = qid.clone();
            move || {
                n += 1;
                format!("{qid}-d{n}")
            }
        };

        let primary_pattern = g.pick(&patterns_for(kind)[..2]);
        let fillers: Vec<&str> = PRIMARY_FILLER.choose_multiple(&mut g.rng, 2).copied().collect();
        let side_pattern = g.pick(&patterns_for(side.1)[..2]);
        let primary = [
            fill(fillers[0], &entity),
            fact_sentence(primary_pattern, &entity, attribute, &true_value),
            fact_sentence(side_pattern, &entity, side.0, &side_value),
            fill(fillers[1], &entity),
        ];
        let ts = g.timestamp();
        qdocs.push(doc(next_id(), &entity, &primary, ts, SourceKind::Abstract));

        if redundant {
            let others: Vec<Pattern> = patterns_for(kind).iter().copied().filter(|p| *p != primary_pattern).collect();
            let pattern = g.pick(&others);
            let body = [
                fact_sentence(side_pattern, &entity, side.0, &side_value),
                format!("{entity} has drawn steady scholarly attention."),
                fact_sentence(pattern, &entity, attribute, &true_value),
            ];
            let ts = g.timestamp();
            qdocs.push(doc(next_id(), &entity, &body, ts, SourceKind::Report));
        }

        if let Some(wrong) = &distractor_value {
            let pattern = g.pick(patterns_for(kind));
            let body = [
                format!("Readers often ask what the {attribute} of {entity} is."),
                fact_sentence(pattern, &entity, attribute, wrong),
                format!("Some sources list a different {attribute} for {entity}."),
            ];
            let ts = g.timestamp();
            qdocs.push(doc(next_id(), &entity, &body, ts, SourceKind::Blog));
        }

        while qdocs.len() < n_docs {
            let lines: Vec<String> = BACKGROUND_FILLER
                .choose_multiple(&mut g.rng, 2)
                .map(|t| fill(t, &entity))
                .collect();
            let ts = g.timestamp();
            qdocs.push(doc(next_id(), &format!("{entity} notes"), &lines, ts, SourceKind::Other));
        }

        let key = make_key(&entity, attribute);
        dataset.push(QuestionRecord {
            id: qid.clone(),
            question: format!("What is the {attribute} of {entity}?"),
            gold_answers: vec![true_value.clone()],
            doc_ids: qdocs.iter().map(|d| d.id.clone()).collect(),
            conflict_keys: if conflict { vec![key.clone()] } else { Vec::new() },
        });
        answer_key.push(AnswerKeyEntry {
            question_id: qid,
            key,
            true_value: normalize_value(&true_value),
            distractor_value: distractor_value.as_deref().map(normalize_value),
            unsupported_value: normalize_value(&unsupported),
            redundant,
            conflict,
        });
        docs.extend(qdocs);
    }

    let corpus = Corpus::from_documents(docs).map_err(|e| FixtureError::InvalidSpec(e.to_string()))?;
    Ok(Fixture {
        corpus,
        dataset,
        answer_key,
    })
}
