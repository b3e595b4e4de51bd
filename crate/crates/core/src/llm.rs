//! Chat-completion client used by the deliberate navigator and the regulator.
//!
//! Three transports implement [`ChatTransport`]:
//! * [`HttpTransport`]: OpenAI-compatible `POST` with a bearer token.
//! * [`ScriptedTransport`]: replays a JSONL transcript strictly in order.
//! * [`OracleTransport`]: answers from the world's ground truth. Test use only;
//!   every transcript entry it produces carries `oracle: true`.

use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runner::Action;
use crate::world::{geodesic_distances, WorldGraph};

pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";
pub const DEFAULT_MODEL: &str = "gpt-4o";
pub const API_KEY_ENV: &str = "R3_LLM_API_KEY";
pub const ENDPOINT_ENV: &str = "R3_LLM_ENDPOINT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Perception,
    Planning,
    Prediction,
    Ending,
    Formulation,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Perception => "perception",
            Stage::Planning => "planning",
            Stage::Prediction => "prediction",
            Stage::Ending => "ending",
            Stage::Formulation => "formulation",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("{stage}: transport failure: {message}")]
    Transport { stage: Stage, message: String },
    #[error("{stage}: scripted transcript exhausted after {used} replies")]
    ScriptExhausted { stage: Stage, used: usize },
    #[error("{stage}: scripted reply {index} expects a prompt containing {expected:?}")]
    ScriptMismatch { stage: Stage, index: usize, expected: String },
    #[error("{stage}: no parseable reply after {attempts} attempts (last: {last:?})")]
    Unparseable { stage: Stage, attempts: usize, last: String },
    #[error("{path}:{line}: {message}")]
    Script { path: String, line: usize, message: String },
    #[error("{stage}: the oracle transport cannot answer without prompt context")]
    OracleContext { stage: Stage },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Structured view of the state a prompt was rendered from. Only mock
/// transports read it; it never reaches the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub viewpoint: String,
    pub start: String,
    /// Prediction options in letter order.
    pub options: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub stage: Stage,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub context: Option<PromptContext>,
}

impl ChatRequest {
    pub fn prompt_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChatReply {
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
}

impl ChatReply {
    pub fn text(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            ..Default::default()
        }
    }
}

pub trait ChatTransport: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, LlmError>;

    fn label(&self) -> &'static str;

    fn is_oracle(&self) -> bool {
        false
    }
}

/// OpenAI-compatible chat completion over HTTP (text only).
pub struct HttpTransport {
    pub endpoint: String,
    pub model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Transport {
                stage: Stage::Perception,
                message: e.to_string(),
            })?;
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            client,
        })
    }

    /// Endpoint and key from `R3_LLM_ENDPOINT` / `R3_LLM_API_KEY`.
    pub fn from_env(model: impl Into<String>) -> Result<Self, LlmError> {
        let endpoint = std::env::var(ENDPOINT_ENV).unwrap_or_else(|_| DEFAULT_ENDPOINT.to_string());
        Self::new(endpoint, model, std::env::var(API_KEY_ENV).ok(), Duration::from_secs(120))
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, LlmError> {
        let fail = |message: String| LlmError::Transport {
            stage: request.stage,
            message,
        };
        let body = serde_json::json!({
            "model": self.model,
            "messages": request.messages,
            "temperature": request.temperature,
        });
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| fail(e.to_string()))?;
        let status = resp.status();
        let value: serde_json::Value = resp.json().map_err(|e| fail(format!("HTTP {status}: {e}")))?;
        if !status.is_success() {
            return Err(fail(format!("HTTP {status}: {value}")));
        }
        let content = value["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| fail(format!("response without choices[0].message.content: {value}")))?;
        Ok(ChatReply {
            content: content.to_string(),
            prompt_tokens: value["usage"]["prompt_tokens"].as_u64(),
            completion_tokens: value["usage"]["completion_tokens"].as_u64(),
        })
    }

    fn label(&self) -> &'static str {
        "http"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub expect_substring: String,
    pub reply: String,
}

/// Replays replies in file order; any deviation is an error.
pub struct ScriptedTransport {
    entries: Vec<ScriptEntry>,
    cursor: Mutex<usize>,
}

impl ScriptedTransport {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Self {
            entries,
            cursor: Mutex::new(0),
        }
    }

    pub fn replies<I: IntoIterator<Item = S>, S: Into<String>>(replies: I) -> Self {
        Self::new(
            replies
                .into_iter()
                .map(|r| ScriptEntry {
                    expect_substring: String::new(),
                    reply: r.into(),
                })
                .collect(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref();
        let err = |line: usize, message: String| LlmError::Script {
            path: path.display().to_string(),
            line,
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(0, e.to_string()))?;
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| err(i + 1, e.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(Self::new(entries))
    }

    pub fn remaining(&self) -> usize {
        self.entries.len() - *self.cursor.lock().expect("cursor lock")
    }
}

impl ChatTransport for ScriptedTransport {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, LlmError> {
        let mut cur = self.cursor.lock().expect("cursor lock");
        let entry = self.entries.get(*cur).ok_or(LlmError::ScriptExhausted {
            stage: request.stage,
            used: *cur,
        })?;
        if !request.prompt_text().contains(&entry.expect_substring) {
            return Err(LlmError::ScriptMismatch {
                stage: request.stage,
                index: *cur,
                expected: entry.expect_substring.clone(),
            });
        }
        *cur += 1;
        Ok(ChatReply::text(entry.reply.clone()))
    }

    fn label(&self) -> &'static str {
        "scripted"
    }
}

/// Ground-truth answers for one episode.
pub struct OracleTransport {
    world: Arc<WorldGraph>,
    goal: String,
    to_goal: Vec<f64>,
}

impl OracleTransport {
    pub fn new(world: Arc<WorldGraph>, goal: &str) -> Result<Self, crate::world::WorldError> {
        let to_goal = geodesic_distances(&world, goal)?;
        Ok(Self {
            world,
            goal: goal.to_string(),
            to_goal,
        })
    }

    fn dist(&self, vp: &str) -> f64 {
        self.world.index_of(vp).map_or(f64::INFINITY, |i| self.to_goal[i])
    }
}

impl ChatTransport for OracleTransport {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, LlmError> {
        let ctx = request.context.as_ref().ok_or(LlmError::OracleContext { stage: request.stage })?;
        let here = ctx.viewpoint.as_str();
        let text = match request.stage {
            Stage::Perception => {
                let tags: Vec<&str> = self
                    .world
                    .get(here)
                    .map(|v| v.local_tags().into_iter().collect())
                    .unwrap_or_default();
                if tags.is_empty() { "nothing notable".to_string() } else { tags.join(", ") }
            }
            Stage::Planning => "Follow the shortest route to the destination.".to_string(),
            Stage::Prediction => {
                let pick = if here == self.goal {
                    ctx.options.iter().position(Action::is_stop)
                } else {
                    ctx.options
                        .iter()
                        .enumerate()
                        .filter_map(|(k, a)| a.target().map(|t| (k, self.world.distance(here, t).unwrap_or(f64::INFINITY) + self.dist(t))))
                        .min_by(|a, b| a.1.total_cmp(&b.1))
                        .map(|(k, _)| k)
                };
                let k = pick.unwrap_or(0);
                char::from(b'A' + k as u8).to_string()
            }
            Stage::Ending => if here == self.goal { "Yes" } else { "No" }.to_string(),
            Stage::Formulation => {
                let decision = if self.dist(here) > self.dist(&ctx.start) { "RESTART" } else { "CONTINUE" };
                format!("DECISION: {decision}\nPLAN: Follow the shortest route to the destination.")
            }
        };
        Ok(ChatReply::text(text))
    }

    fn label(&self) -> &'static str {
        "oracle"
    }

    fn is_oracle(&self) -> bool {
        true
    }
}

/// Always fails; stands in where no language model is configured.
pub struct NoTransport;

impl ChatTransport for NoTransport {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, LlmError> {
        Err(LlmError::Transport {
            stage: request.stage,
            message: "no language model configured".into(),
        })
    }

    fn label(&self) -> &'static str {
        "none"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub call: usize,
    pub stage: Stage,
    pub attempt: usize,
    pub transport: String,
    pub oracle: bool,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
}

/// A parsed reply and how many retries it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Answer<T> {
    pub value: T,
    pub retries: usize,
}

pub const DEFAULT_RETRIES: usize = 2;

/// Chat client with bounded retries, call counting and a transcript.
pub struct LlmClient {
    transport: Arc<dyn ChatTransport>,
    pub retries: usize,
    pub temperature: f64,
    transcript: Mutex<Vec<TranscriptEntry>>,
}

impl LlmClient {
    pub fn new(transport: Arc<dyn ChatTransport>) -> Self {
        Self {
            transport,
            retries: DEFAULT_RETRIES,
            temperature: 0.0,
            transcript: Mutex::new(Vec::new()),
        }
    }

    pub fn disabled() -> Self {
        Self::new(Arc::new(NoTransport))
    }

    pub fn transport_label(&self) -> &'static str {
        self.transport.label()
    }

    pub fn is_oracle(&self) -> bool {
        self.transport.is_oracle()
    }

    /// Number of chat calls issued, retries included.
    pub fn calls(&self) -> usize {
        self.transcript.lock().expect("transcript lock").len()
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.transcript.lock().expect("transcript lock").clone()
    }

    /// Transcript entries from index `from` on.
    pub fn transcript_since(&self, from: usize) -> Vec<TranscriptEntry> {
        self.transcript.lock().expect("transcript lock")[from..].to_vec()
    }

    /// Send `prompt`, retrying while `parse` rejects the reply.
    /// Transport errors are not retried.
    pub fn ask<T>(
        &self,
        stage: Stage,
        prompt: &str,
        context: Option<PromptContext>,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<Answer<T>, LlmError> {
        let request = ChatRequest {
            stage,
            messages: vec![ChatMessage {
                role: "user".into(),
                content: prompt.to_string(),
            }],
            temperature: self.temperature,
            context,
        };
        let mut last = String::new();
        for attempt in 0..=self.retries {
            let result = self.transport.complete(&request);
            let mut log = self.transcript.lock().expect("transcript lock");
            let call = log.len();
            let mut entry = TranscriptEntry {
                call,
                stage,
                attempt,
                transport: self.transport.label().to_string(),
                oracle: self.transport.is_oracle(),
                prompt: prompt.to_string(),
                reply: None,
                error: None,
                prompt_tokens: None,
                completion_tokens: None,
            };
            match result {
                Err(e) => {
                    entry.error = Some(e.to_string());
                    log.push(entry);
                    return Err(e);
                }
                Ok(reply) => {
                    entry.reply = Some(reply.content.clone());
                    entry.prompt_tokens = reply.prompt_tokens;
                    entry.completion_tokens = reply.completion_tokens;
                    log.push(entry);
                    drop(log);
                    if let Some(value) = parse(&reply.content) {
                        return Ok(Answer { value, retries: attempt });
                    }
                    tracing::warn!(%stage, attempt, reply = %reply.content, "unparseable reply");
                    last = reply.content;
                }
            }
        }
        Err(LlmError::Unparseable {
            stage,
            attempts: self.retries + 1,
            last,
        })
    }
}
