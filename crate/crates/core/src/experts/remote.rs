//! HTTP/JSON client for model servers.
//!
//! Wire protocol:
//!
//! ```text
//! POST /embed     {"modality", "text" | "payload_b64"}          -> {"embedding": [f32]}
//! POST /generate  {"table_markdown", "question", "dataset_tag"} -> {"answer", "explanation", "output_tokens"?}
//! POST /complete  {"prompt"}                                    -> {"text"}
//! ```
//!
//! Transport failures (refused connections, timeouts, broken sockets) are
//! retried with exponential backoff. HTTP error statuses and malformed bodies
//! are returned immediately.

use std::io;
use std::time::{Duration, Instant};

use base64::Engine;
use log::debug;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::{
    BackendDescriptor, BackendKind, EmbedPayload, EmbedRequest, EmbeddingBackend, ExpertOutput,
    GenerateRequest, GenerationBackend, Modality, Result, Timed,
};
use crate::answer::whitespace_tokens;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    pub base_url: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_s: f64,
}

fn default_timeout() -> f64 {
    30.0
}

fn default_retries() -> u32 {
    2
}

fn default_backoff() -> f64 {
    0.25
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout_s: default_timeout(),
            max_retries: default_retries(),
            backoff_base_s: default_backoff(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RemoteError {
    #[error("{endpoint}: timed out after {attempts} attempt(s)")]
    Timeout { endpoint: String, attempts: u32 },
    #[error("{endpoint}: connection refused after {attempts} attempt(s)")]
    ConnectionRefused { endpoint: String, attempts: u32 },
    #[error("{endpoint}: transport error after {attempts} attempt(s): {detail}")]
    Transport {
        endpoint: String,
        attempts: u32,
        detail: String,
    },
    #[error("{endpoint}: HTTP {status}: {body}")]
    Application {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("{endpoint}: malformed response: {detail}")]
    MalformedResponse { endpoint: String, detail: String },
}

impl RemoteError {
    pub fn endpoint(&self) -> &str {
        match self {
            RemoteError::Timeout { endpoint, .. }
            | RemoteError::ConnectionRefused { endpoint, .. }
            | RemoteError::Transport { endpoint, .. }
            | RemoteError::Application { endpoint, .. }
            | RemoteError::MalformedResponse { endpoint, .. } => endpoint,
        }
    }

    /// Attempts made before giving up; application-level failures count one.
    pub fn attempts(&self) -> u32 {
        match self {
            RemoteError::Timeout { attempts, .. }
            | RemoteError::ConnectionRefused { attempts, .. }
            | RemoteError::Transport { attempts, .. } => *attempts,
            _ => 1,
        }
    }
}

enum Failure {
    Timeout,
    Refused,
    Transport(String),
    Final(RemoteError),
}

#[derive(Clone)]
pub struct RemoteClient {
    config: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteClient {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    pub fn endpoint(&self, route: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), route.trim_start_matches('/'))
    }

    /// POSTs `body` to `route`, returning the parsed JSON object and the
    /// client-side latency of the successful attempt.
    pub fn post_json(&self, route: &str, body: &Value) -> std::result::Result<(Value, f64), RemoteError> {
        let endpoint = self.endpoint(route);
        let mut attempts = 0;
        loop {
            attempts += 1;
            let started = Instant::now();
            let failure = match self.attempt(&endpoint, body) {
                Ok(v) => return Ok((v, started.elapsed().as_secs_f64())),
                Err(f) => f,
            };
            let retryable = attempts <= self.config.max_retries;
            let err = match failure {
                Failure::Final(e) => return Err(e),
                Failure::Timeout => RemoteError::Timeout {
                    endpoint: endpoint.clone(),
                    attempts,
                },
                Failure::Refused => RemoteError::ConnectionRefused {
                    endpoint: endpoint.clone(),
                    attempts,
                },
                Failure::Transport(detail) => RemoteError::Transport {
                    endpoint: endpoint.clone(),
                    attempts,
                    detail,
                },
            };
            if !retryable {
                return Err(err);
            }
            let delay = self.config.backoff_base_s * 2f64.powi(attempts as i32 - 1);
            debug!("{err}; retrying in {delay:.3}s");
            std::thread::sleep(Duration::from_secs_f64(delay.max(0.0)));
        }
    }

    fn attempt(&self, endpoint: &str, body: &Value) -> std::result::Result<Value, Failure> {
        let mut resp = self.agent.post(endpoint).send_json(body).map_err(classify)?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| match classify(e) {
                Failure::Final(_) => Failure::Transport("failed reading response body".into()),
                other => other,
            })?;
        if !(200..300).contains(&status) {
            return Err(Failure::Final(RemoteError::Application {
                endpoint: endpoint.to_string(),
                status,
                body: text,
            }));
        }
        serde_json::from_str(&text).map_err(|e| {
            Failure::Final(RemoteError::MalformedResponse {
                endpoint: endpoint.to_string(),
                detail: format!("invalid JSON: {e}"),
            })
        })
    }

    pub fn malformed(&self, route: &str, detail: impl Into<String>) -> RemoteError {
        RemoteError::MalformedResponse {
            endpoint: self.endpoint(route),
            detail: detail.into(),
        }
    }
}

fn classify(err: ureq::Error) -> Failure {
    match err {
        ureq::Error::Timeout(_) => Failure::Timeout,
        ureq::Error::Io(e) => match e.kind() {
            io::ErrorKind::ConnectionRefused => Failure::Refused,
            io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => Failure::Timeout,
            _ => Failure::Transport(e.to_string()),
        },
        ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => Failure::Refused,
        ureq::Error::Protocol(e) => Failure::Transport(e.to_string()),
        other => Failure::Transport(other.to_string()),
    }
}

fn str_field<'a>(client: &RemoteClient, route: &str, v: &'a Value, key: &str) -> std::result::Result<&'a str, RemoteError> {
    v.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| client.malformed(route, format!("missing string field {key:?}")))
}

pub struct RemoteEmbedder {
    descriptor: BackendDescriptor,
    client: RemoteClient,
}

impl RemoteEmbedder {
    pub fn new(modality: Modality, config: RemoteConfig) -> Self {
        let client = RemoteClient::new(config);
        Self {
            descriptor: BackendDescriptor::new(BackendKind::Remote, modality, client.endpoint("embed")),
            client,
        }
    }
}

impl EmbeddingBackend for RemoteEmbedder {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_raw(&self, req: &EmbedRequest) -> Result<Timed<Vec<f32>>> {
        let modality = self.descriptor.modality.as_str();
        let body = match &req.payload {
            EmbedPayload::TableText(s) | EmbedPayload::Question(s) => json!({"modality": modality, "text": s}),
            EmbedPayload::TableImage(bytes) => json!({
                "modality": modality,
                "payload_b64": base64::engine::general_purpose::STANDARD.encode(bytes),
            }),
        };
        let (resp, latency) = self.client.post_json("embed", &body)?;
        let values = resp
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| self.client.malformed("embed", "missing array field \"embedding\""))?;
        let value = values
            .iter()
            .map(|v| v.as_f64().map(|f| f as f32))
            .collect::<Option<Vec<f32>>>()
            .ok_or_else(|| self.client.malformed("embed", "non-numeric embedding entry"))?;
        Ok(Timed {
            value,
            latency_seconds: latency,
        })
    }
}

pub struct RemoteGenerator {
    descriptor: BackendDescriptor,
    client: RemoteClient,
}

impl RemoteGenerator {
    pub fn new(modality: Modality, config: RemoteConfig) -> Self {
        let client = RemoteClient::new(config);
        Self {
            descriptor: BackendDescriptor::new(BackendKind::Remote, modality, client.endpoint("generate")),
            client,
        }
    }
}

impl GenerationBackend for RemoteGenerator {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn generate(&self, req: &GenerateRequest) -> Result<ExpertOutput> {
        let body = json!({
            "table_markdown": req.table_markdown,
            "question": req.question,
            "dataset_tag": req.dataset.as_str(),
        });
        let (resp, latency) = self.client.post_json("generate", &body)?;
        let answer = str_field(&self.client, "generate", &resp, "answer")?.to_string();
        let explanation = str_field(&self.client, "generate", &resp, "explanation")?.to_string();
        let output_tokens = match resp.get("output_tokens") {
            None | Some(Value::Null) => whitespace_tokens(&answer) + whitespace_tokens(&explanation),
            Some(v) => v
                .as_u64()
                .ok_or_else(|| self.client.malformed("generate", "output_tokens must be a non-negative integer"))?,
        };
        Ok(ExpertOutput {
            answer,
            explanation,
            latency_seconds: latency,
            output_tokens,
        })
    }
}
