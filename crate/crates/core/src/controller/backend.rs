//! LLM backends reachable by a prompt → text exchange.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::prompt::Stage;

/// Environment variable holding the API key for HTTP backends.
pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Connection failures, timeouts, 5xx and rate limiting. Retried.
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("credential rejected: {0}")]
    Auth(String),
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("backend unavailable after {attempts} attempts: {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("malformed backend response: {0}")]
    BadResponse(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionRequest {
    pub stage: Stage,
    pub prompt: String,
    pub temperature: f64,
    /// Token key → bias. Empty when the backend has no bias field.
    pub logit_bias: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Scripted,
}

#[async_trait]
pub trait LlmBackend: Send + Sync {
    async fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError>;

    fn kind(&self) -> BackendKind;

    /// Whether the wire protocol carries a token-bias field.
    fn supports_logit_bias(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Matcher {
    Exact(String),
    Contains(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RuleSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stage: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exact: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reply: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    replies: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScriptFile {
    #[serde(default)]
    default: String,
    #[serde(default)]
    rules: Vec<RuleSpec>,
}

#[derive(Debug)]
struct Rule {
    stage: Option<Stage>,
    matcher: Option<Matcher>,
    replies: Vec<String>,
    cursor: AtomicUsize,
}

impl Rule {
    fn matches(&self, request: &CompletionRequest) -> bool {
        if self.stage.is_some_and(|s| s != request.stage) {
            return false;
        }
        match &self.matcher {
            None => true,
            Some(Matcher::Exact(p)) => *p == request.prompt,
            Some(Matcher::Contains(p)) => request.prompt.contains(p.as_str()),
        }
    }

    /// Replies are handed out in order; the last one repeats.
    fn next_reply(&self) -> &str {
        let i = self.cursor.fetch_add(1, Ordering::Relaxed);
        &self.replies[i.min(self.replies.len() - 1)]
    }
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("cannot read script {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid script: {0}")]
    Invalid(String),
}

/// A deterministic backend answering from an ordered request → reply table.
///
/// Rules are tried in order and the first match wins; a rule may restrict
/// itself to one stage and match the prompt exactly or by substring. Every
/// call is recorded for later inspection.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    rules: Vec<Rule>,
    default_reply: String,
    calls: Mutex<Vec<CompletionRequest>>,
}

impl ScriptedBackend {
    pub fn new(default_reply: impl Into<String>) -> Self {
        Self {
            default_reply: default_reply.into(),
            ..Default::default()
        }
    }

    fn push(mut self, stage: Option<Stage>, matcher: Option<Matcher>, replies: Vec<String>) -> Self {
        assert!(!replies.is_empty(), "a scripted rule needs at least one reply");
        self.rules.push(Rule {
            stage,
            matcher,
            replies,
            cursor: AtomicUsize::new(0),
        });
        self
    }

    pub fn on_exact(self, prompt: impl Into<String>, reply: impl Into<String>) -> Self {
        self.push(None, Some(Matcher::Exact(prompt.into())), vec![reply.into()])
    }

    pub fn on_contains(self, needle: impl Into<String>, reply: impl Into<String>) -> Self {
        self.push(None, Some(Matcher::Contains(needle.into())), vec![reply.into()])
    }

    pub fn on_stage(self, stage: Stage, reply: impl Into<String>) -> Self {
        self.push(Some(stage), None, vec![reply.into()])
    }

    pub fn on_stage_contains(self, stage: Stage, needle: impl Into<String>, reply: impl Into<String>) -> Self {
        self.push(Some(stage), Some(Matcher::Contains(needle.into())), vec![reply.into()])
    }

    /// Like [`on_stage_contains`](Self::on_stage_contains) but answers each
    /// successive match with the next reply in `replies`.
    pub fn on_stage_sequence(
        self,
        stage: Stage,
        needle: Option<&str>,
        replies: impl IntoIterator<Item = impl Into<String>>,
    ) -> Self {
        let matcher = needle.map(|n| Matcher::Contains(n.to_string()));
        self.push(Some(stage), matcher, replies.into_iter().map(Into::into).collect())
    }

    pub fn from_json(text: &str) -> Result<Self, ScriptError> {
        let file: ScriptFile = serde_json::from_str(text).map_err(|e| ScriptError::Invalid(e.to_string()))?;
        let mut backend = ScriptedBackend::new(file.default);
        for (i, spec) in file.rules.into_iter().enumerate() {
            let matcher = match (spec.exact, spec.contains) {
                (Some(_), Some(_)) => {
                    return Err(ScriptError::Invalid(format!("rule {i}: both exact and contains given")))
                }
                (Some(e), None) => Some(Matcher::Exact(e)),
                (None, Some(c)) => Some(Matcher::Contains(c)),
                (None, None) => None,
            };
            let mut replies = spec.replies;
            if let Some(r) = spec.reply {
                replies.insert(0, r);
            }
            if replies.is_empty() {
                return Err(ScriptError::Invalid(format!("rule {i}: no reply")));
            }
            backend = backend.push(spec.stage, matcher, replies);
        }
        Ok(backend)
    }

    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Every request received so far, in arrival order.
    pub fn calls(&self) -> Vec<CompletionRequest> {
        self.calls.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    fn answer(&self, request: &CompletionRequest) -> String {
        self.rules
            .iter()
            .find(|r| r.matches(request))
            .map(|r| r.next_reply().to_string())
            .unwrap_or_else(|| self.default_reply.clone())
    }
}

#[async_trait]
impl LlmBackend for ScriptedBackend {
    async fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        self.calls
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(request.clone());
        Ok(self.answer(request))
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }
}

/// Connection settings for a chat-completion endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// Base URL, e.g. `https://api.openai.com/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_http_timeout")]
    pub timeout_secs: u64,
}

fn default_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

fn default_http_timeout() -> u64 {
    120
}

impl HttpBackendConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: default_key_env(),
            timeout_secs: default_http_timeout(),
        }
    }
}

/// Chat-completion client: POST `{model, messages, temperature, logit_bias}`,
/// reply read from `choices[0].message.content`.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::Client,
    config: HttpBackendConfig,
    api_key: Option<String>,
}

impl HttpBackend {
    /// Reads the credential from the configured environment variable.
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Self::with_key(config, api_key)
    }

    pub fn with_key(config: HttpBackendConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            config,
            api_key,
        })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    pub(crate) fn request_body(&self, request: &CompletionRequest) -> serde_json::Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
        });
        if !request.logit_bias.is_empty() {
            body["logit_bias"] = json!(request.logit_bias);
        }
        body
    }
}

#[async_trait]
impl LlmBackend for HttpBackend {
    async fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let mut builder = self.client.post(self.endpoint()).json(&self.request_body(request));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(BackendError::Auth(text));
        }
        if status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS {
            return Err(BackendError::Transport(format!("status {status}: {text}")));
        }
        if !status.is_success() {
            return Err(BackendError::Rejected {
                status: status.as_u16(),
                body: text,
            });
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| BackendError::BadResponse(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::BadResponse("missing choices[0].message.content".into()))
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }

    fn supports_logit_bias(&self) -> bool {
        true
    }
}
