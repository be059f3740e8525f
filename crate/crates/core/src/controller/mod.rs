//! The LLM controller: stage prompts, backend calls and reply parsing.

mod backend;
mod prompt;
mod session;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::warn;

pub use backend::{
    BackendError, BackendKind, CompletionRequest, HttpBackend, HttpBackendConfig, LlmBackend, ScriptError,
    ScriptedBackend, DEFAULT_API_KEY_ENV,
};
pub use prompt::{
    demo_variety, CriticDemos, CriticExample, DemoConfig, DemoLibrary, Demonstration, PromptError, PromptSet,
    PromptTemplate, Stage,
};
pub use session::{ChatSession, Role, Turn};

use crate::executor::InferenceResult;
use crate::jsonscan;
use crate::registry::{Assignment, ModelDescriptor};
use crate::taskgraph::{parse_plan, Task, TaskGraph, TaskGraphError, TaskManifest};

/// Appended to a prompt when the previous reply could not be parsed.
pub const FORMAT_REMINDER: &str = "Reminder: answer with the JSON format requested above and nothing else.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("planning failed after {attempts} attempts: {source}")]
    Plan { attempts: u32, source: TaskGraphError },
    #[error("could not parse {stage} reply after {attempts} attempts: {message}")]
    Parse {
        stage: Stage,
        attempts: u32,
        message: String,
    },
    #[error("invalid controller configuration: {0}")]
    Config(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{0}")]
pub struct ReplyParseError(pub String);

/// A token whose logit is nudged to keep the controller in JSON. The wire key
/// is the tokenizer id when known, otherwise the literal text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatToken {
    pub text: String,
    #[serde(default)]
    pub token_id: Option<u32>,
}

impl FormatToken {
    fn key(&self) -> String {
        self.token_id.map_or_else(|| self.text.clone(), |id| id.to_string())
    }
}

fn default_format_tokens() -> Vec<FormatToken> {
    // cl100k_base ids for "{" and "}"
    vec![
        FormatToken {
            text: "{".into(),
            token_id: Some(90),
        },
        FormatToken {
            text: "}".into(),
            token_id: Some(92),
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub temperature: f64,
    pub format_bias: f64,
    pub format_tokens: Vec<FormatToken>,
    /// Re-asks after a transport failure or an unparseable reply.
    pub max_retries: u32,
    pub demos: DemoConfig,
    /// Number of most recent chat turns shown to the planner.
    pub chat_window: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            format_bias: 0.2,
            format_tokens: default_format_tokens(),
            max_retries: 2,
            demos: DemoConfig::default(),
            chat_window: 10,
        }
    }
}

impl ControllerConfig {
    pub fn check(&self) -> Result<(), ControllerError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(ControllerError::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if !self.format_bias.is_finite() {
            return Err(ControllerError::Config("format_bias must be finite".into()));
        }
        Ok(())
    }

    pub fn logit_bias(&self) -> BTreeMap<String, f64> {
        self.format_tokens.iter().map(|t| (t.key(), self.format_bias)).collect()
    }
}

/// Planning output together with how many controller calls it took.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub graph: TaskGraph,
    pub raw: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelChoice {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub choice: Choice,
    pub reason: String,
}

pub fn build_planning_prompt(
    prompts: &PromptSet,
    request: &str,
    available_tasks: &[&str],
    demos: &[Demonstration],
    chat_log: &ChatSession,
    chat_window: usize,
) -> Result<String, PromptError> {
    let bindings = BTreeMap::from([
        (
            "Available Task List",
            prompt::render_task_list(available_tasks.iter().copied()),
        ),
        (
            "Demonstrations",
            prompt::render_pairs(demos.iter().map(|d| (d.request.as_str(), d.plan.as_str()))),
        ),
        ("Chat Logs", chat_log.render_log(chat_window)),
        ("User Input", request.to_string()),
    ]);
    prompts.get(Stage::Planning).render(&bindings)
}

#[derive(Serialize)]
struct CandidateLine<'a> {
    model_id: &'a str,
    metadata: CandidateMeta<'a>,
    description: &'a str,
}

#[derive(Serialize)]
struct CandidateMeta<'a> {
    downloads: u64,
    task_types: Vec<&'a str>,
    endpoint: &'a str,
}

pub fn build_selection_prompt(
    prompts: &PromptSet,
    request: &str,
    task: &Task,
    candidates: &[&ModelDescriptor],
) -> Result<String, PromptError> {
    if candidates.is_empty() {
        return Err(PromptError::NoCandidates {
            stage: Stage::Selection,
        });
    }
    let lines: Vec<String> = candidates
        .iter()
        .map(|m| {
            serde_json::to_string(&CandidateLine {
                model_id: &m.model_id,
                metadata: CandidateMeta {
                    downloads: m.downloads,
                    task_types: m.task_types.iter().map(String::as_str).collect(),
                    endpoint: m.endpoint.kind_str(),
                },
                description: &m.description,
            })
            .expect("candidate serializes")
        })
        .collect();
    let bindings = BTreeMap::from([
        ("Candidate Models", format!("\n{}\n", lines.join("\n"))),
        ("User Input", request.to_string()),
        ("Task", serde_json::to_string(task).expect("task serializes")),
    ]);
    prompts.get(Stage::Selection).render(&bindings)
}

pub fn build_response_prompt(
    prompts: &PromptSet,
    user_input: &str,
    tasks: &TaskGraph,
    assignments: &BTreeMap<u64, Assignment>,
    predictions: &BTreeMap<u64, InferenceResult>,
) -> Result<String, PromptError> {
    let assigned: BTreeMap<String, Value> = assignments
        .iter()
        .map(|(id, a)| {
            (
                id.to_string(),
                serde_json::json!({"model_id": a.model_id, "reason": a.reason}),
            )
        })
        .collect();
    let results: Vec<String> = predictions
        .values()
        .map(|r| serde_json::to_string(r).expect("result serializes"))
        .collect();
    let predictions = if results.is_empty() {
        "[]".to_string()
    } else {
        format!("[\n{}\n]", results.join(",\n"))
    };
    let bindings = BTreeMap::from([
        ("User Input", user_input.to_string()),
        ("Tasks", tasks.to_json()),
        (
            "Model Assignment",
            serde_json::to_string(&assigned).expect("assignments serialize"),
        ),
        ("Predictions", predictions),
    ]);
    prompts.get(Stage::Response).render(&bindings)
}

pub fn build_critic_prompt(
    prompts: &PromptSet,
    available_tasks: &[&str],
    demos: &CriticDemos,
    request: &str,
    pred: &TaskGraph,
) -> Result<String, PromptError> {
    let pairs = |xs: &[CriticExample]| {
        xs.iter()
            .map(|d| format!("{{\"user request\": {:?}, \"task planning\": {}}}", d.request, d.plan))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let bindings = BTreeMap::from([
        (
            "Available Task List",
            prompt::render_task_list(available_tasks.iter().copied()),
        ),
        ("Positive Demos", pairs(&demos.positive)),
        ("Negative Demos", pairs(&demos.negative)),
        ("Input", request.to_string()),
        ("Output", pred.to_json()),
    ]);
    prompts.get(Stage::Critic).render(&bindings)
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// Extracts `{"id": ..., "reason": ...}` from a selection reply.
pub fn parse_selection(raw: &str) -> Result<ModelChoice, ReplyParseError> {
    let map = jsonscan::first_json_object_with_key(raw, "id")
        .ok_or_else(|| ReplyParseError("no JSON object with an \"id\" key".into()))?;
    let id = value_text(&map["id"]);
    if id.is_empty() {
        return Err(ReplyParseError("empty model id".into()));
    }
    Ok(ModelChoice {
        id,
        reason: map.get("reason").map(value_text).unwrap_or_default(),
    })
}

/// Extracts `{"choice": "yes"/"no", "reason": ...}` from a critic reply.
pub fn parse_judgment(raw: &str) -> Result<Judgment, ReplyParseError> {
    let map = jsonscan::first_json_object_with_key(raw, "choice")
        .ok_or_else(|| ReplyParseError("no JSON object with a \"choice\" key".into()))?;
    let choice = match value_text(&map["choice"]).trim().to_ascii_lowercase().as_str() {
        "yes" => Choice::Yes,
        "no" => Choice::No,
        other => return Err(ReplyParseError(format!("choice must be yes or no, got {other:?}"))),
    };
    Ok(Judgment {
        choice,
        reason: map.get("reason").map(value_text).unwrap_or_default(),
    })
}

fn with_reminder(prompt: &str, attempt: u32) -> String {
    if attempt == 0 {
        prompt.to_string()
    } else {
        format!("{prompt}\n{FORMAT_REMINDER}")
    }
}

/// Drives one backend through the four stage prompts.
pub struct Controller {
    backend: Arc<dyn LlmBackend>,
    config: ControllerConfig,
    prompts: PromptSet,
    manifest: Arc<TaskManifest>,
    demos: Vec<Demonstration>,
    critic_demos: CriticDemos,
}

impl std::fmt::Debug for Controller {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Controller")
            .field("backend", &self.backend.kind())
            .field("config", &self.config)
            .field("demos", &self.demos.len())
            .finish()
    }
}

impl Controller {
    pub fn new(
        backend: Arc<dyn LlmBackend>,
        config: ControllerConfig,
        manifest: Arc<TaskManifest>,
    ) -> Result<Self, ControllerError> {
        config.check()?;
        let demos = DemoLibrary::builtin(&manifest).select(config.demos);
        Ok(Self {
            backend,
            config,
            prompts: PromptSet::builtin(),
            manifest,
            demos,
            critic_demos: CriticDemos::builtin(),
        })
    }

    pub fn with_prompts(mut self, prompts: PromptSet) -> Self {
        self.prompts = prompts;
        self
    }

    pub fn with_demos(mut self, demos: Vec<Demonstration>) -> Self {
        self.demos = demos;
        self
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    pub fn manifest(&self) -> &TaskManifest {
        &self.manifest
    }

    pub fn demos(&self) -> &[Demonstration] {
        &self.demos
    }

    pub fn backend(&self) -> &Arc<dyn LlmBackend> {
        &self.backend
    }

    /// One completion, re-sent up to `max_retries` times on transport failure.
    pub async fn complete(&self, stage: Stage, prompt: String) -> Result<String, BackendError> {
        let request = CompletionRequest {
            stage,
            prompt,
            temperature: self.config.temperature,
            logit_bias: if self.backend.supports_logit_bias() {
                self.config.logit_bias()
            } else {
                BTreeMap::new()
            },
        };
        let attempts = self.config.max_retries + 1;
        let mut last = None;
        for attempt in 0..attempts {
            match self.backend.complete(&request).await {
                Ok(text) => return Ok(text),
                Err(e) if e.is_retryable() => {
                    warn!(%stage, attempt, error = %e, "controller call failed, retrying");
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(BackendError::Unavailable {
            attempts,
            last: last.map(|e| e.to_string()).unwrap_or_default(),
        })
    }

    pub fn planning_prompt(&self, request: &str, chat: &ChatSession) -> Result<String, PromptError> {
        let names: Vec<&str> = self.manifest.names().collect();
        build_planning_prompt(
            &self.prompts,
            request,
            &names,
            &self.demos,
            chat,
            self.config.chat_window,
        )
    }

    /// Plans `request`, re-asking on unparseable output.
    pub async fn plan(&self, request: &str, chat: &ChatSession) -> Result<PlanOutcome, ControllerError> {
        let prompt = self.planning_prompt(request, chat)?;
        let mut attempt = 0;
        loop {
            let raw = self.complete(Stage::Planning, with_reminder(&prompt, attempt)).await?;
            attempt += 1;
            match parse_plan(&raw, &self.manifest) {
                Ok(graph) => {
                    return Ok(PlanOutcome {
                        graph,
                        raw,
                        attempts: attempt,
                    })
                }
                Err(e) if attempt > self.config.max_retries => {
                    return Err(ControllerError::Plan {
                        attempts: attempt,
                        source: e,
                    })
                }
                Err(e) => warn!(attempt, error = %e, "unparseable plan, asking again"),
            }
        }
    }

    /// Asks the controller to pick one of `candidates` for `task`.
    pub async fn choose_model(
        &self,
        request: &str,
        task: &Task,
        candidates: &[&ModelDescriptor],
    ) -> Result<ModelChoice, ControllerError> {
        let prompt = build_selection_prompt(&self.prompts, request, task, candidates)?;
        self.ask_parsed(Stage::Selection, &prompt, parse_selection).await
    }

    pub async fn respond(
        &self,
        user_input: &str,
        tasks: &TaskGraph,
        assignments: &BTreeMap<u64, Assignment>,
        predictions: &BTreeMap<u64, InferenceResult>,
    ) -> Result<String, ControllerError> {
        let prompt = build_response_prompt(&self.prompts, user_input, tasks, assignments, predictions)?;
        Ok(self.complete(Stage::Response, prompt).await?)
    }

    pub fn critic_prompt(&self, request: &str, pred: &TaskGraph) -> Result<String, PromptError> {
        let names: Vec<&str> = self.manifest.names().collect();
        build_critic_prompt(&self.prompts, &names, &self.critic_demos, request, pred)
    }

    pub async fn judge(&self, request: &str, pred: &TaskGraph) -> Result<Judgment, ControllerError> {
        let prompt = self.critic_prompt(request, pred)?;
        self.ask_parsed(Stage::Critic, &prompt, parse_judgment).await
    }

    async fn ask_parsed<T>(
        &self,
        stage: Stage,
        prompt: &str,
        parse: impl Fn(&str) -> Result<T, ReplyParseError>,
    ) -> Result<T, ControllerError> {
        let mut attempt = 0;
        loop {
            let raw = self.complete(stage, with_reminder(prompt, attempt)).await?;
            attempt += 1;
            match parse(&raw) {
                Ok(v) => return Ok(v),
                Err(e) if attempt > self.config.max_retries => {
                    return Err(ControllerError::Parse {
                        stage,
                        attempts: attempt,
                        message: e.0,
                    })
                }
                Err(e) => warn!(%stage, attempt, error = %e.0, "unparseable reply, asking again"),
            }
        }
    }
}
