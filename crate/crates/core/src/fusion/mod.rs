//! The fusion path: an LLM agent that reads the question, the table and both
//! single-modality answers, and produces a final answer.
//!
//! The agent's behaviour is classified after the fact. If its answer matches
//! one of the experts it acted as an arbitrator; otherwise it rescued the
//! instance with a new answer.

mod prompt;

pub use prompt::{
    build_fusion_prompt, dataset_instruction, FusionPrompt, STANDARD_INSTRUCTION, STRICT_JSON_SUFFIX,
    TEMPLATE_VERSION,
};

use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::answer::{answers_match, whitespace_tokens};
use crate::experts::{wrong_answer, ExpertOutput, LabelBook, RemoteClient, RemoteConfig, RemoteError, Timed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionRequest {
    pub example_id: String,
    pub question: String,
    pub table_markdown: String,
    pub text_output: ExpertOutput,
    pub vision_output: ExpertOutput,
    pub dataset_tag: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionRole {
    Arbitrator,
    Rescuer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    pub final_answer: String,
    pub raw_response: String,
    pub role: FusionRole,
    /// Sum of agent call latencies, including a re-prompt if one was needed.
    pub api_latency_seconds: f64,
    pub output_tokens: u64,
    pub attempts: u32,
    /// The agent never produced a parseable answer; `final_answer` is the
    /// text expert's.
    pub degraded: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("no JSON object with an \"answer\" field in response: {raw:?}")]
    Parse { raw: String },
    #[error("fusion agent unavailable: {0}")]
    Unavailable(#[from] RemoteError),
}

/// What the agent sees for one call.
#[derive(Debug, Clone, Copy)]
pub struct AgentRequest<'a> {
    pub example_id: &'a str,
    pub prompt: &'a str,
    /// 0 for the first call, 1 for the strict re-prompt.
    pub attempt: u32,
}

pub trait FusionAgent: Send + Sync {
    fn complete(&self, req: &AgentRequest<'_>) -> Result<Timed<String>, RemoteError>;
}

/// `POST /complete {"prompt"} -> {"text"}`.
pub struct RemoteAgent {
    client: RemoteClient,
}

impl RemoteAgent {
    pub fn new(config: RemoteConfig) -> Self {
        Self {
            client: RemoteClient::new(config),
        }
    }
}

impl FusionAgent for RemoteAgent {
    fn complete(&self, req: &AgentRequest<'_>) -> Result<Timed<String>, RemoteError> {
        let (resp, latency) = self.client.post_json("complete", &json!({"prompt": req.prompt}))?;
        let text = resp
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| self.client.malformed("complete", "missing string field \"text\""))?;
        Ok(Timed {
            value: text.to_string(),
            latency_seconds: latency,
        })
    }
}

type Script = dyn Fn(&AgentRequest<'_>) -> Result<String, RemoteError> + Send + Sync;

/// Offline agent driven by a closure, reporting a fixed latency per call.
pub struct ScriptedAgent {
    latency_seconds: f64,
    script: Box<Script>,
}

impl ScriptedAgent {
    pub fn new(
        latency_seconds: f64,
        script: impl Fn(&AgentRequest<'_>) -> Result<String, RemoteError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            latency_seconds,
            script: Box::new(script),
        }
    }

    /// Always answers with `response`.
    pub fn constant(latency_seconds: f64, response: impl Into<String>) -> Self {
        let response = response.into();
        Self::new(latency_seconds, move |_| Ok(response.clone()))
    }

    /// Label-driven simulation: answers with the gold answer when the
    /// example's fusion label is set, otherwise with a wrong answer.
    pub fn oracle(latency_seconds: f64, labels: Arc<LabelBook>) -> Self {
        Self::new(latency_seconds, move |req| {
            let answer = match labels.get(req.example_id) {
                Some(l) if l.fusion => l.gold.clone(),
                Some(l) => wrong_answer(&l.gold, "f"),
                None => "unknown".to_string(),
            };
            Ok(json!({ "answer": answer }).to_string())
        })
    }
}

impl FusionAgent for ScriptedAgent {
    fn complete(&self, req: &AgentRequest<'_>) -> Result<Timed<String>, RemoteError> {
        Ok(Timed {
            value: (self.script)(req)?,
            latency_seconds: self.latency_seconds,
        })
    }
}

/// Extracts the `"answer"` field of the first JSON object in `raw` that has
/// one. Single-element lists are unwrapped; longer lists are joined with ", ".
pub fn parse_fusion_response(raw: &str) -> Result<String, FusionError> {
    for (start, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        let Some(Ok(Value::Object(obj))) = stream.next() else {
            continue;
        };
        if let Some(answer) = obj.get("answer").and_then(answer_text) {
            return Ok(answer.trim().to_string());
        }
    }
    Err(FusionError::Parse { raw: raw.to_string() })
}

fn answer_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(if *b { "True" } else { "False" }.to_string()),
        Value::Array(items) if items.len() == 1 => answer_text(&items[0]),
        Value::Array(items) if !items.is_empty() => {
            let parts: Option<Vec<String>> = items.iter().map(answer_text).collect();
            parts.map(|p| p.join(", "))
        }
        _ => None,
    }
}

pub fn classify_role(final_answer: &str, text_output: &ExpertOutput, vision_output: &ExpertOutput) -> FusionRole {
    if answers_match(final_answer, &text_output.answer) || answers_match(final_answer, &vision_output.answer) {
        FusionRole::Arbitrator
    } else {
        FusionRole::Rescuer
    }
}

/// Builds the prompt, calls the agent and parses its answer. An unparseable
/// response gets one stricter re-prompt; if that also fails the text
/// expert's answer is returned with `degraded` set.
pub fn fuse(req: &FusionRequest, agent: &dyn FusionAgent) -> Result<FusionResult, FusionError> {
    let prompt = build_fusion_prompt(req);
    if let Some(w) = &prompt.warning {
        warn!("{}: {w}", req.example_id);
    }
    let mut latency = 0.0;
    let mut tokens = 0;
    let mut raw = String::new();
    for attempt in 0..2u32 {
        let text = if attempt == 0 {
            prompt.text.clone()
        } else {
            format!("{}{STRICT_JSON_SUFFIX}", prompt.text)
        };
        let reply = agent.complete(&AgentRequest {
            example_id: &req.example_id,
            prompt: &text,
            attempt,
        })?;
        latency += reply.latency_seconds;
        tokens += whitespace_tokens(&reply.value);
        raw = reply.value;
        if let Ok(answer) = parse_fusion_response(&raw) {
            return Ok(FusionResult {
                role: classify_role(&answer, &req.text_output, &req.vision_output),
                final_answer: answer,
                raw_response: raw,
                api_latency_seconds: latency,
                output_tokens: tokens,
                attempts: attempt + 1,
                degraded: false,
            });
        }
        warn!("{}: unparseable fusion response on attempt {}", req.example_id, attempt + 1);
    }
    let fallback = req.text_output.answer.clone();
    Ok(FusionResult {
        role: classify_role(&fallback, &req.text_output, &req.vision_output),
        final_answer: fallback,
        raw_response: raw,
        api_latency_seconds: latency,
        output_tokens: tokens,
        attempts: 2,
        degraded: true,
    })
}
