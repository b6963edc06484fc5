use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::header::{AUTHORIZATION, CONTENT_TYPE};
use serde_json::Value;

use super::{ChatBackend, CompletionRequest, GatewayError};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "CASC_API_KEY";

/// OpenAI-compatible `chat/completions` client.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: Client,
    endpoint: String,
    api_key: String,
}

impl HttpBackend {
    pub fn new(base_url: &str, api_key: impl Into<String>, timeout: Duration) -> Result<Self, GatewayError> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Config(format!("http client: {e}")))?;
        Ok(Self {
            client,
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key: api_key.into(),
        })
    }

    pub fn from_env(base_url: &str, timeout: Duration) -> Result<Self, GatewayError> {
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| GatewayError::Config(format!("{API_KEY_ENV} is not set")))?;
        Self::new(base_url, key, timeout)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

/// Pulls `choices[0].message.content` out of a response body.
pub(crate) fn parse_completion(body: &str) -> Result<String, GatewayError> {
    let value: Value = serde_json::from_str(body)
        .map_err(|e| GatewayError::MalformedResponse(format!("invalid JSON: {e}")))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| GatewayError::MalformedResponse("missing choices[0].message.content".into()))
}

impl ChatBackend for HttpBackend {
    fn send(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let response = self
            .client
            .post(&self.endpoint)
            .header(AUTHORIZATION, format!("Bearer {}", self.api_key))
            .header(CONTENT_TYPE, "application/json")
            .body(serde_json::to_vec(request).expect("request serializes"))
            .send()
            .map_err(classify)?;
        let status = response.status();
        if !status.is_success() {
            return Err(GatewayError::HttpStatus(status.as_u16()));
        }
        let body = response.text().map_err(classify)?;
        parse_completion(&body)
    }
}

fn classify(e: reqwest::Error) -> GatewayError {
    if e.is_timeout() {
        GatewayError::Timeout
    } else {
        GatewayError::Transport(e.to_string())
    }
}
