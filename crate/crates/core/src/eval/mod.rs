//! Metrics, the variant runner and the synthetic fixture generator.

pub mod fixture;
pub mod harness;
pub mod metrics;

pub use fixture::{generate_fixture, AnswerKeyEntry, Fixture, FixtureError, FixtureSpec};
pub use harness::{reports_json, summary_csv, Aggregates, EvalError, EvalRecord, EvalReport, Pipeline, Trace, Variant};
pub use metrics::{exact_match, f1_score, hallucination_flag, normalize_answer};
