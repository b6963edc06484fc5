//! The `casc` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or config error, 3 backend
//! error. Diagnostics go to stderr, data to stdout.

use std::ffi::OsString;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{parse_config, ConfigError, PipelineConfig};
use crate::consistency::{check_resolve, ConsistencyReport};
use crate::corpus::{load_corpus, QuestionRecord};
use crate::eval::{generate_fixture, reports_json, summary_csv, EvalError, FixtureSpec, Pipeline, Variant};
use crate::extract::{extract_all, Claim, ExtractError};
use crate::retrieval::{build_index, search, Bm25Params, Index, RetrievedSet, INDEX_FORMAT_VERSION};
use crate::synthesis::{synthesize, SynthesizedContext};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Backend(_) => EXIT_BACKEND,
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        if e.is_backend() {
            CliError::Backend(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "casc", about = "Retrieve, analyze, synthesize and read")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus, dataset and answer key.
    Fixture {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build and persist a BM25 index.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank documents for a free-text query.
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 1.2)]
        k1: f64,
        #[arg(long, default_value_t = 0.75)]
        b: f64,
    },
    /// Retrieve and extract claims.
    Extract(StageArgs),
    /// Group and resolve claims.
    Check(StageArgs),
    /// Render the budgeted context.
    Synthesize {
        #[command(flatten)]
        stage: StageArgs,
        /// Print the accumulated stage JSON instead of the rendered text.
        #[arg(long)]
        json: bool,
    },
    /// Answer from the synthesized context.
    Answer {
        #[command(flatten)]
        stage: StageArgs,
        /// Print the full answer record instead of the text.
        #[arg(long)]
        json: bool,
    },
    /// Evaluate one variant over the configured dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        variant: Variant,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Report path; defaults to `<paths.output>/<variant>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every variant and print the CSV summary.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Output directory; defaults to `paths.output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    /// Previous stage's JSON (`-` for stdin). Without it, upstream stages run.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Question from the configured dataset.
    #[arg(long, conflicts_with = "question")]
    question_id: Option<String>,
    /// Ad-hoc question text.
    #[arg(long)]
    question: Option<String>,
}

/// Accumulated output of the stage-wise commands; each stage fills one more
/// field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOutput {
    pub question: QuestionRecord,
    pub retrieved: RetrievedSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claims: Option<Vec<Claim>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ConsistencyReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<SynthesizedContext>,
}

#[derive(Clone, Copy, PartialEq, PartialOrd)]
enum Stage {
    Extract,
    Check,
    Synthesize,
}

fn version() -> &'static str {
    static V: std::sync::OnceLock<String> = std::sync::OnceLock::new();
    V.get_or_init(|| format!("{} (index format_version {INDEX_FORMAT_VERSION})", env!("CARGO_PKG_VERSION")))
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_out(path: &Path, body: &str) -> Result<(), CliError> {
    crate::eval::harness::write_file(path, body).map_err(data_err)
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn extract_err(question_id: &str, e: ExtractError) -> CliError {
    let msg = format!("question {question_id}: {e}");
    match e {
        ExtractError::BackendFailure { .. } => CliError::Backend(msg),
        _ => CliError::Data(msg),
    }
}

fn load_pipeline(config: &Path) -> Result<Pipeline, CliError> {
    Ok(Pipeline::from_config(parse_config(config)?)?)
}

fn resolve_question(pipeline: &Pipeline, args: &StageArgs) -> Result<QuestionRecord, CliError> {
    match (&args.question_id, &args.question) {
        (Some(id), _) => pipeline
            .load_dataset()?
            .into_iter()
            .find(|q| &q.id == id)
            .ok_or_else(|| CliError::Data(format!("question {id} not in dataset"))),
        (None, Some(text)) => Ok(QuestionRecord {
            id: "adhoc".into(),
            question: text.clone(),
            gold_answers: Vec::new(),
            doc_ids: Vec::new(),
            conflict_keys: Vec::new(),
        }),
        (None, None) => Err(CliError::Usage("one of --input, --question-id or --question is required".into())),
    }
}

fn read_stage(path: &Path, stdin: &mut dyn Read) -> Result<StageOutput, CliError> {
    let raw = if path == Path::new("-") {
        let mut s = String::new();
        stdin.read_to_string(&mut s).map_err(data_err)?;
        s
    } else {
        read_file(path)?
    };
    serde_json::from_str(&raw).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Runs stages up to and including `target`, starting from `--input` when
/// given.
fn run_stages(pipeline: &Pipeline, args: &StageArgs, target: Stage, stdin: &mut dyn Read) -> Result<StageOutput, CliError> {
    let mut out = match &args.input {
        Some(path) => read_stage(path, stdin)?,
        None => {
            let question = resolve_question(pipeline, args)?;
            let retrieved = pipeline.retrieve(&question, pipeline.config.retriever.k)?;
            StageOutput {
                question,
                retrieved,
                claims: None,
                report: None,
                context: None,
            }
        }
    };
    let qid = out.question.id.clone();
    if out.claims.is_none() {
        let claims = extract_all(&out.question, &out.retrieved, &pipeline.corpus, &pipeline.extractor)
            .map_err(|e| extract_err(&qid, e))?;
        out.claims = Some(claims);
    }
    if target >= Stage::Check && out.report.is_none() {
        let claims = out.claims.as_deref().unwrap_or_default();
        out.report = Some(check_resolve(claims, pipeline.config.cas.policy, &pipeline.corpus));
    }
    if target >= Stage::Synthesize && out.context.is_none() {
        let report = out.report.as_ref().expect("report computed");
        let ctx = synthesize(&out.question, report, pipeline.config.cas.token_budget)
            .map_err(|e| CliError::Data(format!("question {qid}: {e}")))?;
        out.context = Some(ctx);
    }
    Ok(out)
}

fn output_dir(config: &PipelineConfig, out: Option<PathBuf>) -> Option<PathBuf> {
    out.or_else(|| config.paths.output.clone())
}

fn execute(command: Command, stdout: &mut dyn Write, stdin: &mut dyn Read) -> Result<(), CliError> {
    let mut emit = |s: &str| stdout.write_all(s.as_bytes()).map_err(data_err);
    match command {
        Command::Fixture { spec, out, seed } => {
            let mut spec: FixtureSpec =
                serde_json::from_str(&read_file(&spec)?).map_err(|e| CliError::Data(format!("{}: {e}", spec.display())))?;
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let fixture = generate_fixture(&spec).map_err(data_err)?;
            fixture.write_to(&out).map_err(data_err)?;
            emit(&format!(
                "{} documents, {} questions written to {}\n",
                fixture.corpus.len(),
                fixture.dataset.len(),
                out.display()
            ))
        }
        Command::Index { corpus, out } => {
            let corpus_data = load_corpus(&corpus).map_err(data_err)?;
            let index = build_index(&corpus_data).map_err(data_err)?;
            index.save(&out).map_err(data_err)?;
            emit(&format!("indexed {} documents into {}\n", index.doc_count, out.display()))
        }
        Command::Retrieve { index, query, k, k1, b } => {
            let idx = Index::load(&index).map_err(|e| CliError::Data(format!("{}: {e}", index.display())))?;
            let params = Bm25Params { k1, b };
            let set = search(&idx, params, "query", &query, k).map_err(|e| CliError::Usage(e.to_string()))?;
            emit(&to_json(&set))
        }
        Command::Extract(args) => {
            let p = load_pipeline(&args.config)?;
            emit(&to_json(&run_stages(&p, &args, Stage::Extract, stdin)?))
        }
        Command::Check(args) => {
            let p = load_pipeline(&args.config)?;
            emit(&to_json(&run_stages(&p, &args, Stage::Check, stdin)?))
        }
        Command::Synthesize { stage, json } => {
            let p = load_pipeline(&stage.config)?;
            let out = run_stages(&p, &stage, Stage::Synthesize, stdin)?;
            if json {
                emit(&to_json(&out))
            } else {
                let ctx = out.context.as_ref().expect("context computed");
                emit(&format!("{}\n", ctx.rendered_text))
            }
        }
        Command::Answer { stage, json } => {
            let p = load_pipeline(&stage.config)?;
            let out = run_stages(&p, &stage, Stage::Synthesize, stdin)?;
            let ctx = out.context.as_ref().expect("context computed");
            let answer = p.answer(&out.question, ctx)?;
            if json {
                emit(&to_json(&answer))
            } else {
                emit(&format!("{}\n", answer.text))
            }
        }
        Command::Eval { config, variant, jobs, out } => {
            let p = load_pipeline(&config)?;
            let dataset = p.load_dataset()?;
            let report = p.run_variant(variant, &dataset, jobs)?;
            let body = report.to_json();
            let path = out.or_else(|| p.config.paths.output.as_ref().map(|d| d.join(format!("{variant}.json"))));
            match path {
                Some(path) => {
                    write_out(&path, &body)?;
                    emit(&summary_csv(std::slice::from_ref(&report)))
                }
                None => emit(&body),
            }
        }
        Command::Ablate { config, jobs, out } => {
            let p = load_pipeline(&config)?;
            let dataset = p.load_dataset()?;
            let reports = p.ablate(&dataset, jobs)?;
            let csv = summary_csv(&reports);
            if let Some(dir) = output_dir(&p.config, out) {
                write_out(&dir.join("ablation.json"), &reports_json(&reports))?;
                write_out(&dir.join("ablation.csv"), &csv)?;
            }
            emit(&csv)
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write, stdin: &mut dyn Read) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = Cli::command().version(version()).try_get_matches_from(args);
    let cli = match matches.and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = sink.write_all(rendered.as_bytes());
            return code;
        }
    };
    match execute(cli.command, stdout, stdin) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
