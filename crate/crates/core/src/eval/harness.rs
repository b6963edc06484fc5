use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{exact_match, f1_score, hallucination_flag};
use crate::config::{CasBackend, ConfigError, PipelineConfig};
use crate::consistency::{check_resolve, Policy};
use crate::corpus::{load_corpus, load_dataset, Corpus, CorpusError, Document, QuestionRecord};
use crate::extract::{extract_all, ExtractError, ExtractorBackend};
use crate::gateway::{Gateway, GatewayError, PromptTemplates, TemplateError};
use crate::reader::{answer_extractive, answer_llm, Answer, ReaderError, ReaderKind};
use crate::retrieval::{build_index, retrieve_top_k, Index, RetrievalError, RetrievedSet};
use crate::synthesis::{claim_lines, render_claims, render_passthrough, render_unbudgeted, synthesize, SynthesisError, SynthesizedContext};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing paths.{0} in config")]
    MissingPath(&'static str),
    #[error("{path}: {source}")]
    Corpus {
        path: String,
        #[source]
        source: CorpusError,
    },
    #[error(transparent)]
    Index(RetrievalError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("question {question_id}: {source}")]
    Retrieval {
        question_id: String,
        #[source]
        source: RetrievalError,
    },
    #[error("question {question_id}: {source}")]
    Extract {
        question_id: String,
        #[source]
        source: ExtractError,
    },
    #[error("question {question_id}: {source}")]
    Synthesis {
        question_id: String,
        #[source]
        source: SynthesisError,
    },
    #[error(transparent)]
    Reader(#[from] ReaderError),
    #[error("cannot write {path}: {detail}")]
    Io { path: String, detail: String },
}

impl EvalError {
    /// Failures that come from the model backend rather than from data.
    pub fn is_backend(&self) -> bool {
        match self {
            EvalError::Gateway(_) | EvalError::Reader(_) => true,
            EvalError::Extract { source, .. } => matches!(source, ExtractError::BackendFailure { .. }),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Top1,
    Top5,
    CasExtractOnly,
    CasExtractConsistency,
    CasFull,
}

impl Variant {
    /// Ablation order.
    pub const ALL: [Variant; 5] = [
        Variant::Top1,
        Variant::Top5,
        Variant::CasExtractOnly,
        Variant::CasExtractConsistency,
        Variant::CasFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Top1 => "top1",
            Variant::Top5 => "top5",
            Variant::CasExtractOnly => "cas_extract_only",
            Variant::CasExtractConsistency => "cas_extract_consistency",
            Variant::CasFull => "cas_full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?} (expected one of top1, top5, cas_extract_only, cas_extract_consistency, cas_full)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub variant: Variant,
    pub answer: String,
    pub em: u8,
    pub f1: f64,
    pub context_tokens: usize,
    pub hallucinated: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean_em: f64,
    pub mean_f1: f64,
    pub mean_context_tokens: f64,
    pub hallucination_rate: f64,
}

impl Aggregates {
    pub fn of(records: &[EvalRecord]) -> Self {
        if records.is_empty() {
            return Self::default();
        }
        let n = records.len() as f64;
        let mean = |f: &dyn Fn(&EvalRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        Self {
            mean_em: mean(&|r| f64::from(r.em)),
            mean_f1: mean(&|r| r.f1),
            mean_context_tokens: mean(&|r| r.context_tokens as f64),
            hallucination_rate: mean(&|r| f64::from(u8::from(r.hallucinated))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub aggregates: Aggregates,
    /// Sorted by question id.
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn new(variant: Variant, mut records: Vec<EvalRecord>) -> Self {
        records.sort_by(|a, b| a.question_id.cmp(&b.question_id));
        Self {
            variant,
            aggregates: Aggregates::of(&records),
            records,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    variant: &'a str,
    mean_em: f64,
    mean_f1: f64,
    mean_context_tokens: f64,
    hallucination_rate: f64,
}

/// One CSV row per report, with a header.
pub fn summary_csv(reports: &[EvalReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(SummaryRow {
            variant: r.variant.name(),
            mean_em: r.aggregates.mean_em,
            mean_f1: r.aggregates.mean_f1,
            mean_context_tokens: r.aggregates.mean_context_tokens,
            hallucination_rate: r.aggregates.hallucination_rate,
        })
        .expect("csv row");
    }
    String::from_utf8(w.into_inner().expect("csv flush")).expect("utf-8 csv")
}

pub fn reports_json(reports: &[EvalReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize") + "\n"
}

/// Everything needed to answer questions: loaded data plus stage backends.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub corpus: Corpus,
    pub index: Index,
    pub extractor: ExtractorBackend,
    pub templates: Arc<PromptTemplates>,
    gateway: Option<Arc<Gateway>>,
}

/// Everything one question produced on its way through a variant.
#[derive(Debug, Clone)]
pub struct Trace {
    pub retrieved: RetrievedSet,
    pub context: SynthesizedContext,
    pub answer: Answer,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, corpus: Corpus, index: Index) -> Result<Self, EvalError> {
        config.validate()?;
        let templates = Arc::new(match &config.paths.templates {
            Some(dir) => PromptTemplates::load_dir(dir)?,
            None => PromptTemplates::builtin(),
        });
        let needs_gateway = config.reader.kind == ReaderKind::Llm || config.cas.backend == CasBackend::Llm;
        let gateway = if needs_gateway {
            Some(Arc::new(Gateway::from_config(&config.backend)?))
        } else {
            None
        };
        let extractor = match (&gateway, config.cas.backend) {
            (Some(g), CasBackend::Llm) => ExtractorBackend::Llm {
                gateway: Arc::clone(g),
                templates: Arc::clone(&templates),
            },
            _ => ExtractorBackend::RuleBased,
        };
        Ok(Self {
            config,
            corpus,
            index,
            extractor,
            templates,
            gateway,
        })
    }

    /// Loads the corpus named in the config and the persisted index when one
    /// exists, building it otherwise.
    pub fn from_config(config: PipelineConfig) -> Result<Self, EvalError> {
        let path = config.paths.corpus.clone().ok_or(EvalError::MissingPath("corpus"))?;
        let corpus = load_corpus(&path).map_err(|source| EvalError::Corpus {
            path: path.display().to_string(),
            source,
        })?;
        let index = match &config.paths.index {
            Some(p) if p.exists() => Index::load(p).map_err(EvalError::Index)?,
            _ => build_index(&corpus).map_err(EvalError::Index)?,
        };
        Self::new(config, corpus, index)
    }

    pub fn with_gateway(mut self, gateway: Arc<Gateway>) -> Self {
        if self.config.cas.backend == CasBackend::Llm {
            self.extractor = ExtractorBackend::Llm {
                gateway: Arc::clone(&gateway),
                templates: Arc::clone(&self.templates),
            };
        }
        self.gateway = Some(gateway);
        self
    }

    pub fn load_dataset(&self) -> Result<Vec<QuestionRecord>, EvalError> {
        let path = self.config.paths.dataset.clone().ok_or(EvalError::MissingPath("dataset"))?;
        load_dataset(&path).map_err(|source| EvalError::Corpus {
            path: path.display().to_string(),
            source,
        })
    }

    fn k_for(&self, variant: Variant) -> usize {
        match variant {
            Variant::Top1 => 1,
            Variant::Top5 => 5,
            _ => self.config.retriever.k,
        }
    }

    pub fn retrieve(&self, question: &QuestionRecord, k: usize) -> Result<RetrievedSet, EvalError> {
        retrieve_top_k(&self.index, self.config.retriever.params(), question, k).map_err(|source| {
            EvalError::Retrieval {
                question_id: question.id.clone(),
                source,
            }
        })
    }

    fn extract(&self, question: &QuestionRecord, retrieved: &RetrievedSet) -> Result<Vec<crate::extract::Claim>, EvalError> {
        extract_all(question, retrieved, &self.corpus, &self.extractor).map_err(|source| EvalError::Extract {
            question_id: question.id.clone(),
            source,
        })
    }

    /// The context a variant hands to the reader.
    pub fn context(
        &self,
        variant: Variant,
        question: &QuestionRecord,
        retrieved: &RetrievedSet,
    ) -> Result<SynthesizedContext, EvalError> {
        Ok(match variant {
            Variant::Top1 | Variant::Top5 => {
                let mut ctx = render_passthrough(retrieved, &self.corpus);
                if self.config.reader.kind == ReaderKind::Extractive {
                    // The extractive reader cannot read prose: expose every
                    // claim in the passthrough documents, unfiltered.
                    ctx.fact_lines = claim_lines(&self.extract(question, retrieved)?);
                }
                ctx
            }
            Variant::CasExtractOnly => render_claims(&self.extract(question, retrieved)?),
            Variant::CasExtractConsistency => {
                let claims = self.extract(question, retrieved)?;
                render_unbudgeted(&check_resolve(&claims, Policy::FlagOnly, &self.corpus))
            }
            Variant::CasFull => {
                let claims = self.extract(question, retrieved)?;
                let report = check_resolve(&claims, self.config.cas.policy, &self.corpus);
                synthesize(question, &report, self.config.cas.token_budget).map_err(|source| {
                    EvalError::Synthesis {
                        question_id: question.id.clone(),
                        source,
                    }
                })?
            }
        })
    }

    pub fn answer(&self, question: &QuestionRecord, context: &SynthesizedContext) -> Result<Answer, EvalError> {
        match self.config.reader.kind {
            ReaderKind::Extractive => Ok(answer_extractive(question, context)),
            ReaderKind::Llm => {
                let gateway = self
                    .gateway
                    .as_ref()
                    .ok_or_else(|| GatewayError::Config("llm reader without a gateway".into()))?;
                Ok(answer_llm(question, context, gateway, &self.templates)?)
            }
        }
    }

    pub fn trace(&self, variant: Variant, question: &QuestionRecord) -> Result<Trace, EvalError> {
        let retrieved = self.retrieve(question, self.k_for(variant))?;
        let context = self.context(variant, question, &retrieved)?;
        let answer = self.answer(question, &context)?;
        Ok(Trace {
            retrieved,
            context,
            answer,
        })
    }

    pub fn evaluate(&self, variant: Variant, question: &QuestionRecord) -> Result<EvalRecord, EvalError> {
        let trace = self.trace(variant, question)?;
        let docs: Vec<&Document> = trace.retrieved.doc_ids().filter_map(|id| self.corpus.get(id)).collect();
        let text = trace.answer.text;
        Ok(EvalRecord {
            question_id: question.id.clone(),
            variant,
            em: exact_match(&text, &question.gold_answers),
            f1: f1_score(&text, &question.gold_answers),
            context_tokens: trace.answer.context_token_count,
            hallucinated: hallucination_flag(&text, &docs),
            answer: text,
        })
    }

    /// Evaluates every question on up to `jobs` threads. Output does not
    /// depend on `jobs`.
    pub fn run_variant(&self, variant: Variant, dataset: &[QuestionRecord], jobs: usize) -> Result<EvalReport, EvalError> {
        let records = if jobs <= 1 {
            dataset.iter().map(|q| self.evaluate(variant, q)).collect::<Result<Vec<_>, _>>()?
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .expect("thread pool");
            pool.install(|| {
                dataset
                    .par_iter()
                    .map(|q| self.evaluate(variant, q))
                    .collect::<Result<Vec<_>, _>>()
            })?
        };
        Ok(EvalReport::new(variant, records))
    }

    pub fn ablate(&self, dataset: &[QuestionRecord], jobs: usize) -> Result<Vec<EvalReport>, EvalError> {
        Variant::ALL.iter().map(|v| self.run_variant(*v, dataset, jobs)).collect()
    }
}

pub fn write_file(path: &Path, body: &str) -> Result<(), EvalError> {
    let io = |e: std::io::Error| EvalError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, body).map_err(io)
}
