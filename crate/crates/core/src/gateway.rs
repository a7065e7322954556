//! The single chokepoint for all model calls: a chat-completion backend
//! contract, per-question token/latency accounting, retry policy for the
//! remote backend, and a deterministic scripted backend for tests.
//!
//! Every model interaction in the repo flows through [`LlmGateway::complete`],
//! so a harness can assert call counts per purpose tag per question.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::TokenUsage;

/// What a call is for. Drives scripted-backend routing and accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PurposeTag {
    Keywords,
    Decompose,
    ReactReason,
    ReactReflect,
    Synthesize,
    Critic,
    Refine,
    AnnotateMemory,
}

impl PurposeTag {
    pub const ALL: [PurposeTag; 8] = [
        PurposeTag::Keywords,
        PurposeTag::Decompose,
        PurposeTag::ReactReason,
        PurposeTag::ReactReflect,
        PurposeTag::Synthesize,
        PurposeTag::Critic,
        PurposeTag::Refine,
        PurposeTag::AnnotateMemory,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 1024,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub sampling: Sampling,
    pub purpose_tag: PurposeTag,
    /// Accounting key; calls made outside any question may leave it unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<String>,
}

impl ChatRequest {
    pub fn new(purpose_tag: PurposeTag, messages: Vec<Message>) -> Self {
        Self {
            messages,
            sampling: Sampling::default(),
            purpose_tag,
            question_id: None,
        }
    }

    pub fn for_question(mut self, question_id: impl Into<String>) -> Self {
        self.question_id = Some(question_id.into());
        self
    }

    fn transcript(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            out.push_str(&m.content);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: TokenUsage,
    /// Wall-clock seconds spent in the backend call.
    pub latency: f64,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend error (status {status}): {message}")]
    Backend { status: u16, message: String },
    #[error("backend timeout")]
    Timeout,
    #[error("unknown question id: {0}")]
    UnknownQuestion(String),
    #[error("script error: {0}")]
    Script(String),
}

/// Raw reply from a backend; `usage` is the backend-reported count when the
/// wire carries one. A backend may report its own latency (the scripted one
/// reports zero so transcripts stay byte-identical across runs).
pub struct BackendReply {
    pub text: String,
    pub usage: Option<TokenUsage>,
    pub latency: Option<f64>,
}

pub trait ChatBackend: Send + Sync {
    fn call(&self, request: &ChatRequest) -> Result<BackendReply, GatewayError>;
}

fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

// ---------------------------------------------------------------------------
// Scripted backend
// ---------------------------------------------------------------------------

/// One routing rule of the scripted backend. The first rule whose purpose
/// matches and whose `match` substrings all occur in the request transcript
/// wins. `responses` are consumed in order per (question, rule); the last one
/// repeats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptRule {
    pub purpose: PurposeTag,
    #[serde(default, rename = "match")]
    pub matchers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub responses: Vec<String>,
}

impl ScriptRule {
    pub fn new(purpose: PurposeTag, response: impl Into<String>) -> Self {
        Self {
            purpose,
            matchers: Vec::new(),
            response: Some(response.into()),
            responses: Vec::new(),
        }
    }

    pub fn matching(mut self, needle: impl Into<String>) -> Self {
        self.matchers.push(needle.into());
        self
    }

    pub fn with_sequence(purpose: PurposeTag, responses: Vec<String>) -> Self {
        Self {
            purpose,
            matchers: Vec::new(),
            response: None,
            responses,
        }
    }

    fn matches(&self, request: &ChatRequest, transcript: &str) -> bool {
        self.purpose == request.purpose_tag
            && self.matchers.iter().all(|m| transcript.contains(m))
    }
}

/// Fully deterministic backend: replies come from a rule table, token usage
/// is whitespace-derived, latency is zero.
pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
    // (question_id, rule index) -> calls served so far
    consumed: Mutex<HashMap<(String, usize), usize>>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        Self {
            rules,
            consumed: Mutex::new(HashMap::new()),
        }
    }

    pub fn from_json(json: &str) -> Result<Self, GatewayError> {
        let rules: Vec<ScriptRule> =
            serde_json::from_str(json).map_err(|e| GatewayError::Script(e.to_string()))?;
        Ok(Self::new(rules))
    }
}

impl ChatBackend for ScriptedBackend {
    fn call(&self, request: &ChatRequest) -> Result<BackendReply, GatewayError> {
        let transcript = request.transcript();
        for (idx, rule) in self.rules.iter().enumerate() {
            if !rule.matches(request, &transcript) {
                continue;
            }
            let text = if let Some(resp) = &rule.response {
                resp.clone()
            } else {
                if rule.responses.is_empty() {
                    return Err(GatewayError::Script(format!(
                        "rule {idx} has no response"
                    )));
                }
                let key = (
                    request.question_id.clone().unwrap_or_default(),
                    idx,
                );
                let mut consumed = self.consumed.lock().unwrap();
                let count = consumed.entry(key).or_insert(0);
                let pick = (*count).min(rule.responses.len() - 1);
                *count += 1;
                rule.responses[pick].clone()
            };
            let prompt_tokens = request
                .messages
                .iter()
                .map(|m| whitespace_tokens(&m.content))
                .sum();
            let usage = TokenUsage::new(prompt_tokens, whitespace_tokens(&text));
            return Ok(BackendReply {
                text,
                usage: Some(usage),
                latency: Some(0.0),
            });
        }
        Err(GatewayError::Backend {
            status: 0,
            message: format!(
                "no scripted rule for purpose {:?}",
                request.purpose_tag
            ),
        })
    }
}

// ---------------------------------------------------------------------------
// Remote backend (OpenAI-style chat completions)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            backoff: Duration::from_millis(250),
        }
    }
}

pub struct RemoteBackend {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    timeout: Duration,
    retry: RetryPolicy,
}

impl RemoteBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn request_body(&self, request: &ChatRequest) -> serde_json::Value {
        let messages: Vec<serde_json::Value> = request
            .messages
            .iter()
            .map(|m| serde_json::json!({"role": m.role, "content": m.content}))
            .collect();
        let mut body = serde_json::json!({
            "model": self.model,
            "messages": messages,
            "temperature": request.sampling.temperature,
            "max_tokens": request.sampling.max_tokens,
        });
        if let Some(seed) = request.sampling.seed {
            body["seed"] = serde_json::json!(seed);
        }
        body
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<BackendReply, GatewayError> {
        let mut req = ureq::post(&self.endpoint)
            .timeout(self.timeout)
            .set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body.clone()) {
            Ok(resp) => {
                let json: serde_json::Value = resp
                    .into_json()
                    .map_err(|e| GatewayError::Backend {
                        status: 200,
                        message: format!("malformed response body: {e}"),
                    })?;
                let text = json["choices"][0]["message"]["content"]
                    .as_str()
                    .unwrap_or_default()
                    .to_string();
                let usage = json.get("usage").and_then(|u| {
                    let p = u.get("prompt_tokens")?.as_u64()?;
                    let c = u.get("completion_tokens")?.as_u64()?;
                    Some(TokenUsage::new(p, c))
                });
                Ok(BackendReply {
                    text,
                    usage,
                    latency: None,
                })
            }
            Err(ureq::Error::Status(status, resp)) => Err(GatewayError::Backend {
                status,
                message: resp.into_string().unwrap_or_default(),
            }),
            Err(ureq::Error::Transport(t)) => {
                if t.kind() == ureq::ErrorKind::Io {
                    // covers connect/read timeouts and refused connections
                    Err(GatewayError::Timeout)
                } else {
                    Err(GatewayError::Backend {
                        status: 0,
                        message: t.to_string(),
                    })
                }
            }
        }
    }

    fn retryable(err: &GatewayError) -> bool {
        match err {
            GatewayError::Timeout => true,
            GatewayError::Backend { status, .. } => *status == 0 || *status >= 500,
            _ => false,
        }
    }
}

impl ChatBackend for RemoteBackend {
    fn call(&self, request: &ChatRequest) -> Result<BackendReply, GatewayError> {
        let body = self.request_body(request);
        let mut last_err = None;
        for attempt in 0..self.retry.attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.backoff * 2u32.pow(attempt - 1));
            }
            match self.attempt(&body) {
                Ok(reply) => return Ok(reply),
                Err(err) if Self::retryable(&err) => last_err = Some(err),
                Err(err) => return Err(err),
            }
        }
        Err(last_err.unwrap_or(GatewayError::Timeout))
    }
}

// ---------------------------------------------------------------------------
// Backend spec (config surface)
// ---------------------------------------------------------------------------

/// Declarative backend selection, loadable from the run config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Remote {
        endpoint: String,
        model: String,
        /// Name of the environment variable holding the credential.
        #[serde(default)]
        api_key_env: Option<String>,
    },
    Scripted {
        /// Path to a JSON file of [`ScriptRule`]s, or inline rules.
        #[serde(default)]
        script_path: Option<String>,
        #[serde(default)]
        rules: Vec<ScriptRule>,
    },
}

impl BackendSpec {
    pub fn build(&self) -> Result<Box<dyn ChatBackend>, GatewayError> {
        match self {
            BackendSpec::Remote {
                endpoint,
                model,
                api_key_env,
            } => {
                let mut backend = RemoteBackend::new(endpoint.clone(), model.clone());
                if let Some(env) = api_key_env {
                    if let Ok(key) = std::env::var(env) {
                        backend = backend.with_api_key(key);
                    }
                }
                Ok(Box::new(backend))
            }
            BackendSpec::Scripted { script_path, rules } => {
                let mut all = rules.clone();
                if let Some(path) = script_path {
                    let json = std::fs::read_to_string(path)
                        .map_err(|e| GatewayError::Script(format!("{path}: {e}")))?;
                    let mut from_file: Vec<ScriptRule> = serde_json::from_str(&json)
                        .map_err(|e| GatewayError::Script(format!("{path}: {e}")))?;
                    all.append(&mut from_file);
                }
                Ok(Box::new(ScriptedBackend::new(all)))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Gateway with usage ledger
// ---------------------------------------------------------------------------

/// One completed call, as recorded in the ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub purpose: PurposeTag,
    pub usage: TokenUsage,
    pub latency: f64,
    /// True when usage was whitespace-estimated rather than backend-reported.
    pub approximate: bool,
}

#[derive(Debug, Default, Clone)]
struct QuestionLedger {
    usage: TokenUsage,
    seconds: f64,
    calls: Vec<CallRecord>,
}

pub struct LlmGateway {
    backend: Box<dyn ChatBackend>,
    ledger: Mutex<HashMap<String, QuestionLedger>>,
}

impl LlmGateway {
    pub fn new(backend: Box<dyn ChatBackend>) -> Self {
        Self {
            backend,
            ledger: Mutex::new(HashMap::new()),
        }
    }

    pub fn scripted(rules: Vec<ScriptRule>) -> Self {
        Self::new(Box::new(ScriptedBackend::new(rules)))
    }

    /// Issue one chat completion and account for it.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let start = Instant::now();
        let reply = self.backend.call(request)?;
        let latency = reply
            .latency
            .unwrap_or_else(|| start.elapsed().as_secs_f64());
        let (usage, approximate) = match reply.usage {
            Some(u) => (u, false),
            None => {
                let prompt = request
                    .messages
                    .iter()
                    .map(|m| whitespace_tokens(&m.content))
                    .sum();
                (
                    TokenUsage::new(prompt, whitespace_tokens(&reply.text)),
                    true,
                )
            }
        };
        let record = CallRecord {
            purpose: request.purpose_tag,
            usage,
            latency,
            approximate,
        };
        let key = request.question_id.clone().unwrap_or_default();
        let mut ledger = self.ledger.lock().unwrap();
        let entry = ledger.entry(key).or_default();
        entry.usage += usage;
        entry.seconds += latency;
        entry.calls.push(record);
        Ok(ChatResponse {
            text: reply.text,
            usage,
            latency,
        })
    }

    /// Accumulated usage and backend seconds for one question.
    pub fn usage_ledger(&self, question_id: &str) -> Result<(TokenUsage, f64), GatewayError> {
        let ledger = self.ledger.lock().unwrap();
        ledger
            .get(question_id)
            .map(|e| (e.usage, e.seconds))
            .ok_or_else(|| GatewayError::UnknownQuestion(question_id.to_string()))
    }

    /// Full call log for one question (empty when none recorded).
    pub fn call_log(&self, question_id: &str) -> Vec<CallRecord> {
        let ledger = self.ledger.lock().unwrap();
        ledger
            .get(question_id)
            .map(|e| e.calls.clone())
            .unwrap_or_default()
    }

    pub fn calls_by_purpose(&self, question_id: &str, purpose: PurposeTag) -> usize {
        self.call_log(question_id)
            .iter()
            .filter(|c| c.purpose == purpose)
            .count()
    }

    /// True if any recorded usage was estimated rather than backend-reported.
    pub fn has_approximate_usage(&self) -> bool {
        let ledger = self.ledger.lock().unwrap();
        ledger
            .values()
            .any(|e| e.calls.iter().any(|c| c.approximate))
    }
}
