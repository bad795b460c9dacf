use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::kg::EditScope;

use super::{CompletionRequest, Endpoint, EndpointError, ProbeOptions, RetryPolicy};

fn default_samples() -> usize {
    5
}
fn default_temperature() -> f64 {
    0.7
}
fn default_max_tokens() -> u32 {
    256
}
fn default_timeout() -> u64 {
    60
}
fn default_parallel() -> usize {
    4
}

/// Settings of the graph-backed mock, used when `base_url` starts with `mock:`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MockSettings {
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    /// Edit applied to every graph's seed fact before answering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit: Option<MockEdit>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockEdit {
    pub scope: EditScope,
    pub new_object: String,
}

/// How to reach a chat-completions endpoint and how hard to sample it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    #[serde(default)]
    pub model_name: String,
    #[serde(default = "default_samples")]
    pub samples_per_query: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout")]
    pub request_timeout_secs: u64,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockSettings>,
}

impl EndpointConfig {
    pub fn new(base_url: &str, model_name: &str) -> Self {
        EndpointConfig {
            base_url: base_url.to_string(),
            model_name: model_name.to_string(),
            samples_per_query: default_samples(),
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
            request_timeout_secs: default_timeout(),
            max_parallel: default_parallel(),
            auth: None,
            mock: None,
        }
    }

    pub fn is_mock(&self) -> bool {
        self.base_url.starts_with("mock:")
    }

    pub fn validate(&self) -> Result<(), EndpointError> {
        if self.samples_per_query < 1 {
            return Err(EndpointError::Config("samples_per_query must be at least 1".into()));
        }
        if self.max_parallel < 1 {
            return Err(EndpointError::Config("max_parallel must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(EndpointError::Config("temperature must be non-negative".into()));
        }
        if self.base_url.trim().is_empty() {
            return Err(EndpointError::Config("base_url is empty".into()));
        }
        Ok(())
    }

    pub fn probe_options(&self) -> ProbeOptions {
        ProbeOptions {
            samples_per_query: self.samples_per_query,
            max_parallel: self.max_parallel,
            retry: RetryPolicy::default(),
            conversation: false,
            keep_responses: false,
        }
    }
}

/// Client for an OpenAI-style `/chat/completions` endpoint.
pub struct HttpEndpoint {
    agent: ureq::Agent,
    url: String,
    model: String,
    temperature: f64,
    max_tokens: u32,
    token: Option<String>,
}

impl HttpEndpoint {
    /// Builds a client, reading the bearer token from the configured variable.
    pub fn from_config(config: &EndpointConfig) -> Result<Self, EndpointError> {
        config.validate()?;
        let token = match &config.auth {
            Some(var) => Some(std::env::var(var).map_err(|_| EndpointError::AuthMissing(var.clone()))?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.request_timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpEndpoint {
            agent,
            url: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            model: config.model_name.clone(),
            temperature: config.temperature,
            max_tokens: config.max_tokens,
            token,
        })
    }

    pub fn request_body(&self, request: &CompletionRequest) -> Value {
        json!({
            "model": self.model,
            "messages": request.messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        })
    }
}

/// Text of the first choice: `message.content`, falling back to `text`.
pub fn first_choice_text(body: &Value) -> Result<String, EndpointError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| EndpointError::Malformed("no choices in response".into()))?;
    choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .or_else(|| choice.get("text").and_then(Value::as_str))
        .map(str::to_string)
        .ok_or_else(|| EndpointError::Malformed("first choice has no text".into()))
}

impl Endpoint for HttpEndpoint {
    fn complete(&self, request: &CompletionRequest) -> Result<String, EndpointError> {
        let mut call = self.agent.post(&self.url);
        if let Some(token) = &self.token {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = call
            .send_json(self.request_body(request))
            .map_err(|e| EndpointError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| EndpointError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(EndpointError::Status { status, body: text });
        }
        let body: Value = serde_json::from_str(&text).map_err(|e| EndpointError::Malformed(e.to_string()))?;
        first_choice_text(&body)
    }
}
