//! The conversational service: sessions, the per-turn pipeline, traces and
//! the HTTP API.

mod config;
mod engine;
pub mod http;
mod store;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

pub use config::{BackendConfig, ServiceConfig, EMPTY_SCRIPT_REPLY};
pub use engine::{Engine, StageTimings, TaskAssignment, WorkflowTrace};
pub use store::{LogEvent, SessionHandle, SessionRecord, SessionStore};

use crate::controller::{BackendError, Controller, PromptSet, Role};
use crate::executor::{ArtifactSink, Executor};
use crate::registry::Registry;
use crate::taskgraph::{ArgKind, TaskManifest};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("session {session:?} has no trace {turn}")]
    UnknownTrace { session: String, turn: usize },
    #[error("no artifact {0:?}")]
    UnknownArtifact(String),
    #[error("controller backend unavailable: {0}")]
    Backend(#[from] BackendError),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("storage error: {0}")]
    Storage(String),
    #[error("internal error: {0}")]
    Internal(String),
}

/// A file uploaded with a message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attachment {
    pub name: String,
    pub data: Vec<u8>,
}

/// A bare file name: no separators, no parent references, not hidden.
fn safe_file_name(name: &str) -> Option<&str> {
    let ok = !name.is_empty() && !name.starts_with('.') && !name.contains(['/', '\\', '\0']) && name.len() <= 255;
    ok.then_some(name)
}

pub struct Service {
    engine: Engine,
    store: SessionStore,
}

impl Service {
    pub fn new(engine: Engine, store: SessionStore) -> Self {
        Self { engine, store }
    }

    /// Wires a service from configuration. Relative paths are taken from `base`.
    pub fn from_config(config: &ServiceConfig, base: &Path) -> Result<Self, ServiceError> {
        let manifest = Arc::new(TaskManifest::builtin());
        let registry = match &config.registry {
            Some(p) => Registry::load(&base.join(p), &manifest).map_err(|e| ServiceError::Config(e.to_string()))?,
            None => Registry::sample(&manifest),
        };
        let backend = config.backend.build(base)?;
        let mut controller = Controller::new(backend, config.controller.clone(), manifest.clone())
            .map_err(|e| ServiceError::Config(e.to_string()))?;
        if let Some(dir) = &config.prompts_dir {
            let prompts = PromptSet::load_dir(&base.join(dir)).map_err(|e| ServiceError::Config(e.to_string()))?;
            controller = controller.with_prompts(prompts);
        }
        let mut builder = Executor::builder(manifest, Arc::new(registry))
            .default_stubs()
            .config(config.executor);
        if let Some(f) = &config.stub_fixtures {
            builder = builder
                .fixtures_file(&base.join(f))
                .map_err(|e| ServiceError::Config(e.to_string()))?;
        }
        let engine = Engine::new(Arc::new(controller), builder.build(), config.selection);
        let store = SessionStore::open(base.join(&config.artifacts_dir))?;
        Ok(Self::new(engine, store))
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    pub fn create_session(&self) -> Result<String, ServiceError> {
        self.store.create()
    }

    pub fn list_sessions(&self) -> Vec<String> {
        self.store.list()
    }

    /// Runs one turn. Attachments are saved into the session directory,
    /// registered as session resources and mentioned in the planner input.
    pub async fn handle_request(
        &self,
        session: &str,
        text: &str,
        attachments: Vec<Attachment>,
    ) -> Result<WorkflowTrace, ServiceError> {
        let handle = self.store.get(session)?;
        let mut record = handle.lock().await;
        let turn = record.traces.len();

        let mut request = text.to_string();
        let mut uploaded = Vec::new();
        for a in attachments {
            let name = safe_file_name(&a.name)
                .ok_or_else(|| ServiceError::BadRequest(format!("invalid attachment name {:?}", a.name)))?;
            let path = record.dir.join(format!("upload-{name}"));
            tokio::fs::write(&path, &a.data)
                .await
                .map_err(|e| ServiceError::Storage(format!("{}: {e}", path.display())))?;
            let locator = path.display().to_string();
            let kind = ArgKind::from_extension(&locator);
            request.push_str(&format!("\n(attached {kind}: {locator})"));
            uploaded.push((locator, kind));
        }

        let sink = ArtifactSink::new(&record.dir).with_prefix(format!("turn{turn}-"));
        let trace = self.engine.run(turn, &request, &record.chat, &sink).await?;

        for (name, kind) in uploaded {
            record.record(LogEvent::Resource { name, kind })?;
        }
        record.record(LogEvent::Turn {
            role: Role::User,
            text: request,
        })?;
        let mut produced = Vec::new();
        for r in &trace.results {
            for (kind, locator) in &r.produced_resources {
                if *kind != ArgKind::Text {
                    record.record(LogEvent::Resource {
                        name: locator.clone(),
                        kind: *kind,
                    })?;
                    produced.push(locator.clone());
                }
            }
        }
        // The planner only sees the chat log, so generated files the response
        // did not mention are listed there for follow-up turns.
        let unmentioned: Vec<&str> = produced
            .iter()
            .map(String::as_str)
            .filter(|p| !trace.response.contains(p))
            .collect();
        let mut reply = trace.response.clone();
        if !unmentioned.is_empty() {
            reply.push_str(&format!("\n(generated files: {})", unmentioned.join(", ")));
        }
        record.record(LogEvent::Turn {
            role: Role::Assistant,
            text: reply,
        })?;
        record.record(LogEvent::Trace {
            trace: Box::new(trace.clone()),
        })?;
        Ok(trace)
    }

    pub async fn get_trace(&self, session: &str, turn: usize) -> Result<WorkflowTrace, ServiceError> {
        let handle = self.store.get(session)?;
        let record = handle.lock().await;
        record
            .traces
            .get(turn)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownTrace {
                session: session.to_string(),
                turn,
            })
    }

    pub async fn chat_log(&self, session: &str) -> Result<crate::controller::ChatSession, ServiceError> {
        let handle = self.store.get(session)?;
        let record = handle.lock().await;
        Ok(record.chat.clone())
    }

    /// Path of a file inside a session directory.
    pub fn artifact_path(&self, session: &str, file: &str) -> Result<PathBuf, ServiceError> {
        self.store.get(session)?;
        let name = safe_file_name(file)
            .filter(|f| *f != "log.jsonl")
            .ok_or_else(|| ServiceError::UnknownArtifact(file.to_string()))?;
        let path = self.store.root().join(session).join(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(ServiceError::UnknownArtifact(file.to_string()))
        }
    }
}
