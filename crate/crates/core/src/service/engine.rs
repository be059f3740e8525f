//! One request through plan → select → execute → respond.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use tracing::info;

use super::ServiceError;
use crate::controller::{ChatSession, Controller, ControllerError};
use crate::executor::{ArtifactSink, Executor, InferenceResult, Status};
use crate::registry::{select, Assignment, Registry, SelectError, SelectionConfig};
use crate::taskgraph::{validate, TaskGraph, ValidationReport};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub planning_ms: f64,
    pub selection_ms: f64,
    pub execution_ms: f64,
    pub response_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum TaskAssignment {
    Assigned(Assignment),
    Unassigned { task_id: u64, reason: String },
}

impl TaskAssignment {
    pub fn task_id(&self) -> u64 {
        match self {
            TaskAssignment::Assigned(a) => a.task_id,
            TaskAssignment::Unassigned { task_id, .. } => *task_id,
        }
    }

    pub fn model_id(&self) -> Option<&str> {
        match self {
            TaskAssignment::Assigned(a) => Some(&a.model_id),
            TaskAssignment::Unassigned { .. } => None,
        }
    }
}

/// Per-turn record of every pipeline stage, in pipeline order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowTrace {
    pub turn: usize,
    pub request: String,
    pub plan: TaskGraph,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_error: Option<String>,
    pub validation: ValidationReport,
    pub stages: Vec<Vec<u64>>,
    pub assignments: Vec<TaskAssignment>,
    pub results: Vec<InferenceResult>,
    pub response: String,
    pub timings: StageTimings,
}

impl WorkflowTrace {
    /// Copy with every wall-clock measurement zeroed, for comparisons.
    pub fn without_timings(&self) -> Self {
        let mut t = self.clone();
        t.timings = StageTimings::default();
        for r in &mut t.results {
            r.duration_ms = 0.0;
        }
        t
    }

    pub fn result(&self, task_id: u64) -> Option<&InferenceResult> {
        self.results.iter().find(|r| r.task_id == task_id)
    }

    pub fn assignment(&self, task_id: u64) -> Option<&TaskAssignment> {
        self.assignments.iter().find(|a| a.task_id() == task_id)
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

/// The stateless part of the service: owns the controller, registry and
/// executor, and turns one request into a trace.
#[derive(Clone)]
pub struct Engine {
    pub controller: Arc<Controller>,
    pub registry: Arc<Registry>,
    pub executor: Executor,
    pub selection: SelectionConfig,
}

impl Engine {
    pub fn new(controller: Arc<Controller>, executor: Executor, selection: SelectionConfig) -> Self {
        let registry = Arc::new(executor.registry().clone());
        Self {
            controller,
            registry,
            executor,
            selection,
        }
    }

    /// Runs the pipeline for `request` against the history in `chat`. Only
    /// controller backend failures escape; everything else is recorded in
    /// the trace.
    pub async fn run(
        &self,
        turn: usize,
        request: &str,
        chat: &ChatSession,
        sink: &ArtifactSink,
    ) -> Result<WorkflowTrace, ServiceError> {
        let mut timings = StageTimings::default();

        let started = Instant::now();
        let (plan, plan_error) = match self.controller.plan(request, chat).await {
            Ok(outcome) => (outcome.graph, None),
            Err(ControllerError::Backend(e)) => return Err(ServiceError::Backend(e)),
            Err(e) => (TaskGraph::empty(), Some(e.to_string())),
        };
        timings.planning_ms = ms_since(started);
        let validation = validate(&plan, self.controller.manifest());
        let stages = plan.stages().unwrap_or_default();
        info!(turn, tasks = plan.len(), valid = validation.ok, "planned");

        let started = Instant::now();
        let assignments: Vec<TaskAssignment> = if validation.ok {
            let picks = join_all(
                plan.tasks()
                    .iter()
                    .map(|t| select(t, request, &self.registry, &self.controller, &self.selection)),
            )
            .await;
            let mut out = Vec::with_capacity(picks.len());
            for (task, pick) in plan.tasks().iter().zip(picks) {
                out.push(match pick {
                    Ok(a) => TaskAssignment::Assigned(a),
                    Err(SelectError::Backend(e)) => return Err(ServiceError::Backend(e)),
                    Err(e) => TaskAssignment::Unassigned {
                        task_id: task.id,
                        reason: e.to_string(),
                    },
                });
            }
            out
        } else {
            plan.tasks()
                .iter()
                .map(|t| TaskAssignment::Unassigned {
                    task_id: t.id,
                    reason: "invalid plan".into(),
                })
                .collect()
        };
        timings.selection_ms = ms_since(started);

        let assigned: BTreeMap<u64, Assignment> = assignments
            .iter()
            .filter_map(|a| match a {
                TaskAssignment::Assigned(a) => Some((a.task_id, a.clone())),
                TaskAssignment::Unassigned { .. } => None,
            })
            .collect();

        let started = Instant::now();
        let results: BTreeMap<u64, InferenceResult> = if validation.ok {
            self.executor.execute_graph(&plan, &assigned, sink).await.results
        } else {
            plan.tasks()
                .iter()
                .map(|t| {
                    (
                        t.id,
                        InferenceResult {
                            task_id: t.id,
                            task: t.task.clone(),
                            model_id: String::new(),
                            inputs: BTreeMap::new(),
                            payload: None,
                            produced_resources: BTreeMap::new(),
                            status: Status::failed("invalid plan"),
                            duration_ms: 0.0,
                        },
                    )
                })
                .collect()
        };
        timings.execution_ms = ms_since(started);

        let started = Instant::now();
        let response = self
            .controller
            .respond(request, &plan, &assigned, &results)
            .await
            .map_err(|e| match e {
                ControllerError::Backend(b) => ServiceError::Backend(b),
                other => ServiceError::Internal(other.to_string()),
            })?;
        timings.response_ms = ms_since(started);

        // Results in plan order, so the trace lines up with the plan.
        let ordered = plan
            .tasks()
            .iter()
            .filter_map(|t| results.get(&t.id).cloned())
            .collect();
        Ok(WorkflowTrace {
            turn,
            request: request.to_string(),
            plan,
            plan_error,
            validation,
            stages,
            assignments,
            results: ordered,
            response,
            timings,
        })
    }
}
