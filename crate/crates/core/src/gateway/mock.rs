use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ChatBackend, CompletionRequest, GatewayError};

/// Stable hex SHA-256 of the request's canonical JSON serialization.
pub fn request_hash(request: &CompletionRequest) -> String {
    let canonical = serde_json::to_vec(request).expect("request serializes");
    hex::encode(Sha256::digest(&canonical))
}

/// Deterministic offline backend. Responses depend only on request content.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    script: HashMap<String, String>,
    fallback: Option<String>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_script(script: HashMap<String, String>) -> Self {
        Self {
            script,
            fallback: None,
        }
    }

    /// Reads a JSON object mapping request hash to response text.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("mock script {}: {e}", path.display())))?;
        let script = serde_json::from_str(&raw)
            .map_err(|e| GatewayError::Config(format!("mock script {}: {e}", path.display())))?;
        Ok(Self::from_script(script))
    }

    pub fn with_fallback(mut self, response: impl Into<String>) -> Self {
        self.fallback = Some(response.into());
        self
    }

    pub fn script(&mut self, request: &CompletionRequest, response: impl Into<String>) -> &mut Self {
        self.script.insert(request_hash(request), response.into());
        self
    }

    pub fn len(&self) -> usize {
        self.script.len()
    }

    pub fn is_empty(&self) -> bool {
        self.script.is_empty()
    }
}

impl ChatBackend for MockBackend {
    fn send(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let hash = request_hash(request);
        match self.script.get(&hash) {
            Some(response) => Ok(response.clone()),
            None => self.fallback.clone().ok_or(GatewayError::Unscripted(hash)),
        }
    }
}
