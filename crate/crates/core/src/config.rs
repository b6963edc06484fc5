//! Strict JSON pipeline configuration. Unknown keys are rejected and
//! relative paths resolve against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::Policy;
use crate::gateway::BackendConfig;
use crate::reader::ReaderKind;
use crate::retrieval::Bm25Params;
use crate::synthesis::{DEFAULT_BUDGET, MIN_BUDGET};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("invalid config field {0}")]
    ConfigInvalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverConfig {
    pub k: usize,
    pub k1: f64,
    pub b: f64,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        let p = Bm25Params::default();
        Self { k: 5, k1: p.k1, b: p.b }
    }
}

impl RetrieverConfig {
    pub fn params(&self) -> Bm25Params {
        Bm25Params { k1: self.k1, b: self.b }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CasBackend {
    #[default]
    RuleBased,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CasConfig {
    pub backend: CasBackend,
    pub policy: Policy,
    pub token_budget: usize,
}

impl Default for CasConfig {
    fn default() -> Self {
        Self {
            backend: CasBackend::RuleBased,
            policy: Policy::FlagOnly,
            token_budget: DEFAULT_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReaderConfig {
    pub kind: ReaderKind,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Directory holding `reader.toml` and `extract.toml`; builtin when unset.
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub retriever: RetrieverConfig,
    pub cas: CasConfig,
    pub reader: ReaderConfig,
    pub backend: BackendConfig,
    pub paths: PathsConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |f: &str| Err(ConfigError::ConfigInvalid(f.to_string()));
        if self.retriever.k < 1 {
            return invalid("retriever.k");
        }
        if !(self.retriever.k1 > 0.0 && self.retriever.k1.is_finite()) {
            return invalid("retriever.k1");
        }
        if !(0.0..=1.0).contains(&self.retriever.b) {
            return invalid("retriever.b");
        }
        if self.cas.token_budget < MIN_BUDGET {
            return invalid("cas.token_budget");
        }
        if let Some(field) = self.backend.invalid_field() {
            return invalid(field);
        }
        Ok(())
    }

    /// Parses and validates `source`; relative paths are joined onto `base`.
    pub fn from_json(source: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut config: PipelineConfig =
            serde_json::from_str(source).map_err(|e| ConfigError::ConfigParse(e.to_string()))?;
        config.validate()?;
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        let paths = &mut config.paths;
        for p in [
            &mut paths.corpus,
            &mut paths.index,
            &mut paths.dataset,
            &mut paths.output,
            &mut paths.templates,
        ] {
            resolve(p);
        }
        resolve(&mut config.backend.mock_script);
        Ok(config)
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<PipelineConfig, ConfigError> {
    let path = path.as_ref();
    let source = fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    PipelineConfig::from_json(&source, base)
}
