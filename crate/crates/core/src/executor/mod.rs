//! Task execution: endpoint dispatch and stage-by-stage scheduling.
//!
//! Tasks of one stage run concurrently (bounded by a semaphore); a stage
//! starts only after the previous one has finished and its resources have
//! been recorded. A task whose prerequisite failed is never dispatched.

mod remote;
pub mod stubs;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tokio::sync::Semaphore;
use tokio::task::JoinSet;
use tracing::{debug, warn};

pub use remote::call_remote;
pub use stubs::{
    load_fixtures, parse_fixtures, DefaultStub, ExpertHandler, ExpertOutput, FixtureBehavior, FixtureStub,
    InferenceRequest, ResourceData,
};

use crate::registry::{Assignment, Registry};
use crate::taskgraph::{resolve_args, ArgKind, ResourceStore, Task, TaskGraph, TaskManifest};

pub const DEFAULT_REMOTE_TIMEOUT_MS: u64 = 30_000;

fn default_timeout_ms() -> u64 {
    DEFAULT_REMOTE_TIMEOUT_MS
}

/// Where a model is served.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Endpoint {
    /// In-process handler, looked up by `handler` or else by task type.
    Local {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        handler: Option<String>,
    },
    Remote {
        url: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

impl Endpoint {
    pub fn local() -> Self {
        Endpoint::Local { handler: None }
    }

    pub fn remote(url: impl Into<String>) -> Self {
        Endpoint::Remote {
            url: url.into(),
            timeout_ms: DEFAULT_REMOTE_TIMEOUT_MS,
        }
    }

    pub fn kind_str(&self) -> &'static str {
        match self {
            Endpoint::Local { .. } => "local",
            Endpoint::Remote { .. } => "remote",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed { message: String },
}

impl Status {
    pub fn failed(message: impl Into<String>) -> Self {
        Status::Failed {
            message: message.into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, Status::Ok)
    }
}

/// Outcome of one task. `inputs` holds the resolved arguments actually sent
/// to the expert (empty when the task was never dispatched).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub task_id: u64,
    pub task: String,
    pub model_id: String,
    pub inputs: BTreeMap<ArgKind, String>,
    pub payload: Option<Value>,
    pub produced_resources: BTreeMap<ArgKind, String>,
    pub status: Status,
    pub duration_ms: f64,
}

impl InferenceResult {
    fn failed(task: &Task, model_id: &str, message: impl Into<String>) -> Self {
        Self {
            task_id: task.id,
            task: task.task.clone(),
            model_id: model_id.to_string(),
            inputs: BTreeMap::new(),
            payload: None,
            produced_resources: BTreeMap::new(),
            status: Status::failed(message),
            duration_ms: 0.0,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status.is_ok()
    }
}

/// Destination for files produced during one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactSink {
    pub dir: PathBuf,
    /// Prepended to `<task_id>.<ext>`; lets several requests share a directory.
    pub file_prefix: String,
}

impl ArtifactSink {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            file_prefix: String::new(),
        }
    }

    pub fn with_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.file_prefix = prefix.into();
        self
    }

    pub fn path_for(&self, task_id: u64, ext: &str) -> PathBuf {
        self.dir.join(format!("{}{task_id}.{ext}", self.file_prefix))
    }
}

#[derive(Debug, Error)]
pub enum ExecutorError {
    #[error("unknown task type {0:?}")]
    UnknownTask(String),
    #[error("cannot read stub fixtures: {0}")]
    Fixtures(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutorConfig {
    /// Upper bound on tasks running at once within a stage.
    pub concurrency: usize,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self { concurrency: 8 }
    }
}

struct Inner {
    manifest: Arc<TaskManifest>,
    registry: Arc<Registry>,
    handlers: HashMap<String, Arc<dyn ExpertHandler>>,
    deployed: HashSet<String>,
    // Built on first remote call; loading TLS roots is slow.
    client: OnceLock<reqwest::Client>,
    config: ExecutorConfig,
}

/// Runs task graphs against the registry's endpoints. Cheap to clone.
#[derive(Clone)]
pub struct Executor {
    inner: Arc<Inner>,
}

/// Everything produced by one graph execution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExecutionOutcome {
    pub stages: Vec<Vec<u64>>,
    pub results: BTreeMap<u64, InferenceResult>,
    pub store: ResourceStore,
}

impl ExecutionOutcome {
    pub fn all_ok(&self) -> bool {
        !self.results.is_empty() && self.results.values().all(InferenceResult::is_ok)
    }
}

pub struct ExecutorBuilder {
    manifest: Arc<TaskManifest>,
    registry: Arc<Registry>,
    handlers: HashMap<String, Arc<dyn ExpertHandler>>,
    deployed: HashSet<String>,
    config: ExecutorConfig,
}

impl ExecutorBuilder {
    /// Installs the built-in deterministic stub for every manifest task.
    pub fn default_stubs(mut self) -> Self {
        for t in self.manifest.tasks() {
            self.handlers
                .insert(t.name.clone(), Arc::new(DefaultStub::new(t.output)));
        }
        self
    }

    /// Registers `handler` under a task type or a handler name used by
    /// `Endpoint::Local { handler }`. Replaces any earlier registration.
    pub fn handler(mut self, key: impl Into<String>, handler: Arc<dyn ExpertHandler>) -> Self {
        self.handlers.insert(key.into(), handler);
        self
    }

    /// Installs fixture-driven stubs for the listed task types.
    pub fn fixtures(mut self, fixtures: BTreeMap<String, FixtureBehavior>) -> Result<Self, ExecutorError> {
        for (task, behavior) in fixtures {
            let output = self
                .manifest
                .get(&task)
                .ok_or_else(|| ExecutorError::UnknownTask(task.clone()))?
                .output;
            self.handlers.insert(task, Arc::new(FixtureStub::new(output, behavior)));
        }
        Ok(self)
    }

    pub fn fixtures_file(self, path: &Path) -> Result<Self, ExecutorError> {
        let f = load_fixtures(path).map_err(ExecutorError::Fixtures)?;
        self.fixtures(f)
    }

    /// Treats `model_id` as deployed locally even if its descriptor points
    /// at a remote endpoint.
    pub fn deploy_locally(mut self, model_id: impl Into<String>) -> Self {
        self.deployed.insert(model_id.into());
        self
    }

    pub fn config(mut self, config: ExecutorConfig) -> Self {
        self.config = config;
        self
    }

    pub fn build(self) -> Executor {
        Executor {
            inner: Arc::new(Inner {
                manifest: self.manifest,
                registry: self.registry,
                handlers: self.handlers,
                deployed: self.deployed,
                client: OnceLock::new(),
                config: self.config,
            }),
        }
    }
}

enum Route {
    Local(Arc<dyn ExpertHandler>),
    Remote { url: String, timeout: Duration },
}

impl Executor {
    pub fn builder(manifest: Arc<TaskManifest>, registry: Arc<Registry>) -> ExecutorBuilder {
        ExecutorBuilder {
            manifest,
            registry,
            handlers: HashMap::new(),
            deployed: HashSet::new(),
            config: ExecutorConfig::default(),
        }
    }

    /// An executor backed entirely by the built-in stubs.
    pub fn with_stubs(manifest: Arc<TaskManifest>, registry: Arc<Registry>) -> Self {
        Self::builder(manifest, registry).default_stubs().build()
    }

    pub fn registry(&self) -> &Registry {
        &self.inner.registry
    }

    pub fn manifest(&self) -> &TaskManifest {
        &self.inner.manifest
    }

    fn route(&self, task: &Task, model_id: &str) -> Result<Route, String> {
        let inner = &self.inner;
        let descriptor = inner
            .registry
            .get(model_id)
            .ok_or_else(|| format!("model {model_id:?} is not in the registry"))?;
        let local_key = match &descriptor.endpoint {
            Endpoint::Local { handler } => Some(handler.clone().unwrap_or_else(|| task.task.clone())),
            Endpoint::Remote { .. } if inner.deployed.contains(model_id) => Some(task.task.clone()),
            Endpoint::Remote { .. } => None,
        };
        if let Some(h) = local_key.and_then(|k| inner.handlers.get(&k)) {
            return Ok(Route::Local(h.clone()));
        }
        match &descriptor.endpoint {
            Endpoint::Remote { url, timeout_ms } => Ok(Route::Remote {
                url: url.clone(),
                timeout: Duration::from_millis(*timeout_ms),
            }),
            Endpoint::Local { .. } => Err("no endpoint".to_string()),
        }
    }

    /// Runs one task whose arguments are already resolved.
    pub async fn dispatch(
        &self,
        task: &Task,
        model_id: &str,
        inputs: BTreeMap<ArgKind, String>,
        sink: &ArtifactSink,
    ) -> InferenceResult {
        let started = Instant::now();
        let mut result = InferenceResult::failed(task, model_id, "");
        result.inputs = inputs.clone();
        let request = InferenceRequest {
            task_id: task.id,
            task_type: task.task.clone(),
            model_id: model_id.to_string(),
            args: inputs,
        };
        let output = match self.route(task, model_id) {
            Err(msg) => Err(msg),
            Ok(Route::Local(h)) => h.infer(&request).await,
            Ok(Route::Remote { url, timeout }) => {
                let client = self.inner.client.get_or_init(reqwest::Client::new);
                call_remote(client, &url, timeout, &request).await
            }
        };
        let stored = match output {
            Ok(out) => self.store_output(task, out, sink).await,
            Err(e) => Err(e),
        };
        result.duration_ms = started.elapsed().as_secs_f64() * 1000.0;
        match stored {
            Ok((payload, produced)) => {
                result.payload = Some(payload);
                result.produced_resources = produced;
                result.status = Status::Ok;
            }
            Err(msg) => {
                debug!(task = task.id, model = model_id, %msg, "task failed");
                result.status = Status::failed(msg);
            }
        }
        result
    }

    async fn store_output(
        &self,
        task: &Task,
        out: ExpertOutput,
        sink: &ArtifactSink,
    ) -> Result<(Value, BTreeMap<ArgKind, String>), String> {
        if let Some(expected) = self.inner.manifest.get(&task.task).map(|t| t.output) {
            if let Some(kind) = out.resources.keys().find(|k| **k != expected) {
                return Err(format!(
                    "expert produced a {kind} resource but {} outputs {expected}",
                    task.task
                ));
            }
        }
        let mut produced = BTreeMap::new();
        for (kind, data) in out.resources {
            let locator = match data {
                ResourceData::Text(t) | ResourceData::Locator(t) => t,
                ResourceData::File { ext, bytes } => {
                    let path = sink.path_for(task.id, &ext);
                    tokio::fs::create_dir_all(&sink.dir)
                        .await
                        .map_err(|e| format!("cannot create {}: {e}", sink.dir.display()))?;
                    tokio::fs::write(&path, bytes)
                        .await
                        .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
                    path.display().to_string()
                }
            };
            produced.insert(kind, locator);
        }
        Ok((out.payload, produced))
    }

    /// Executes `graph` stage by stage. Tasks without an assignment, with a
    /// failed prerequisite, or with unresolvable arguments fail without being
    /// dispatched.
    pub async fn execute_graph(
        &self,
        graph: &TaskGraph,
        assignments: &BTreeMap<u64, Assignment>,
        sink: &ArtifactSink,
    ) -> ExecutionOutcome {
        let mut outcome = ExecutionOutcome::default();
        let stages = match graph.stages() {
            Ok(s) => s,
            Err(e) => {
                for t in graph.tasks() {
                    outcome
                        .results
                        .insert(t.id, InferenceResult::failed(t, "", format!("invalid plan: {e}")));
                }
                return outcome;
            }
        };
        let limit = Arc::new(Semaphore::new(self.inner.config.concurrency.max(1)));

        for stage in &stages {
            let mut running = JoinSet::new();
            let mut spawned: HashMap<tokio::task::Id, u64> = HashMap::new();
            for &id in stage {
                let task = graph.task(id).expect("stage ids come from the graph");
                let upstream_failed = task
                    .prerequisites()
                    .iter()
                    .any(|p| !outcome.results.get(p).is_some_and(InferenceResult::is_ok));
                if upstream_failed {
                    outcome
                        .results
                        .insert(id, InferenceResult::failed(task, "", "upstream"));
                    continue;
                }
                let Some(assignment) = assignments.get(&id) else {
                    outcome
                        .results
                        .insert(id, InferenceResult::failed(task, "", "no model assigned"));
                    continue;
                };
                let inputs = match resolve_args(task, &outcome.store) {
                    Ok(a) => a,
                    Err(e) => {
                        outcome
                            .results
                            .insert(id, InferenceResult::failed(task, &assignment.model_id, e.to_string()));
                        continue;
                    }
                };
                let (this, task, model, sink, limit) = (
                    self.clone(),
                    task.clone(),
                    assignment.model_id.clone(),
                    sink.clone(),
                    limit.clone(),
                );
                let handle = running.spawn(async move {
                    let _permit = limit.acquire_owned().await.expect("semaphore is never closed");
                    this.dispatch(&task, &model, inputs, &sink).await
                });
                spawned.insert(handle.id(), id);
            }
            while let Some(joined) = running.join_next_with_id().await {
                match joined {
                    Ok((_, r)) => {
                        outcome.results.insert(r.task_id, r);
                    }
                    Err(e) => {
                        let id = spawned[&e.id()];
                        warn!(task = id, error = %e, "expert handler panicked");
                        let task = graph.task(id).expect("spawned from graph");
                        let model = assignments.get(&id).map(|a| a.model_id.as_str()).unwrap_or("");
                        outcome
                            .results
                            .insert(id, InferenceResult::failed(task, model, "expert panicked"));
                    }
                }
            }
            // Only the coordinator writes the store, between stages.
            for &id in stage {
                if let Some(r) = outcome.results.get(&id).filter(|r| r.is_ok()) {
                    let _ = outcome.store.insert(id, r.produced_resources.clone());
                }
            }
        }
        outcome.stages = stages;
        outcome
    }
}
