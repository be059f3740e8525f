//! The four-slot task schema, plan parsing, validation and stage layering.
//!
//! A plan is a JSON array of `{"task", "id", "dep", "args"}` objects. `dep`
//! lists prerequisite ids, with `-1` meaning "no prerequisite", and argument
//! values of the form `<resource>-N` stand for the resource produced by
//! task `N`.

mod manifest;
mod resources;
mod validate;

use std::collections::{BTreeMap, BTreeSet};

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;
use serde_json::Value;
use thiserror::Error;

pub use manifest::{ArgKind, TaskManifest, TaskType};
pub use resources::{resolve_args, ResolveError, ResourceStore, StoreError};
pub use validate::{validate, PlanMarker, Rule, Target, ValidationReport, Violation};

use crate::jsonscan;

/// Sentinel used in `dep` for "no prerequisite".
pub const NO_DEPENDENCY: i64 = -1;

const PLACEHOLDER_PREFIX: &str = "<resource>-";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaskGraphError {
    #[error("could not parse plan: {0}")]
    Parse(String),
    #[error("unknown task {task:?} (task id {id})")]
    UnknownTask { task: String, id: u64 },
    #[error("dependency cycle among tasks {0:?}")]
    Cycle(Vec<u64>),
    #[error("task {task} depends on missing task {dep}")]
    UnknownDependency { task: u64, dep: i64 },
    #[error("task id {0} is used more than once")]
    DuplicateId(u64),
    #[error("invalid task manifest: {0}")]
    Manifest(String),
}

/// One parsed sub-task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task: String,
    pub id: u64,
    pub dep: Vec<i64>,
    #[serde(default)]
    pub args: BTreeMap<ArgKind, String>,
}

impl Task {
    pub fn new(task: impl Into<String>, id: u64, dep: Vec<i64>) -> Self {
        Self {
            task: task.into(),
            id,
            dep,
            args: BTreeMap::new(),
        }
    }

    pub fn with_arg(mut self, kind: ArgKind, value: impl Into<String>) -> Self {
        self.args.insert(kind, value.into());
        self
    }

    /// Prerequisite ids with the `-1` sentinel removed. Negative entries other
    /// than the sentinel are dropped here and reported by validation.
    pub fn prerequisites(&self) -> BTreeSet<u64> {
        self.dep.iter().filter(|&&d| d >= 0).map(|&d| d as u64).collect()
    }

    /// Argument slots holding a resource placeholder, with the referenced id.
    pub fn placeholders(&self) -> impl Iterator<Item = (ArgKind, u64)> + '_ {
        self.args
            .iter()
            .filter_map(|(kind, value)| placeholder_target(value).map(|id| (*kind, id)))
    }
}

/// Parses an exact `<resource>-N` placeholder and returns `N`.
pub fn placeholder_target(value: &str) -> Option<u64> {
    let digits = value.strip_prefix(PLACEHOLDER_PREFIX)?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Values that start like a placeholder but do not match the grammar.
pub(crate) fn is_malformed_placeholder(value: &str) -> bool {
    value.starts_with("<resource>") && placeholder_target(value).is_none()
}

/// The placeholder string referring to task `id`.
pub fn placeholder(id: u64) -> String {
    format!("{PLACEHOLDER_PREFIX}{id}")
}

/// A whole plan: tasks in their planned order plus the derived dependency
/// edges (task id → prerequisite ids).
#[derive(Debug, Clone, Default)]
pub struct TaskGraph {
    tasks: Vec<Task>,
    edges: BTreeMap<u64, BTreeSet<u64>>,
    warnings: Vec<String>,
}

impl PartialEq for TaskGraph {
    fn eq(&self, other: &Self) -> bool {
        self.tasks == other.tasks
    }
}

impl Eq for TaskGraph {}

impl TaskGraph {
    pub fn new(tasks: Vec<Task>) -> Self {
        let mut edges: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
        for task in &tasks {
            let prereqs = task.prerequisites();
            if !prereqs.is_empty() {
                edges.entry(task.id).or_default().extend(prereqs);
            }
        }
        Self {
            tasks,
            edges,
            warnings: Vec::new(),
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, id: u64) -> Option<&Task> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn edges(&self) -> &BTreeMap<u64, BTreeSet<u64>> {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.values().map(BTreeSet::len).sum()
    }

    /// Non-fatal oddities noticed while parsing (e.g. duplicate argument keys).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn task_names(&self) -> Vec<&str> {
        self.tasks.iter().map(|t| t.task.as_str()).collect()
    }

    /// Canonical four-slot JSON text of the plan.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.tasks).expect("tasks serialize")
    }

    /// Kahn layering: stage `k` holds exactly the tasks whose prerequisites
    /// all sit in earlier stages. Ids within a stage are sorted.
    pub fn stages(&self) -> Result<Vec<Vec<u64>>, TaskGraphError> {
        let mut ids = BTreeSet::new();
        for task in &self.tasks {
            if !ids.insert(task.id) {
                return Err(TaskGraphError::DuplicateId(task.id));
            }
        }
        for task in &self.tasks {
            if let Some(&dep) = task
                .dep
                .iter()
                .find(|&&d| d != NO_DEPENDENCY && (d < 0 || !ids.contains(&(d as u64))))
            {
                return Err(TaskGraphError::UnknownDependency { task: task.id, dep });
            }
        }

        let mut remaining: BTreeMap<u64, BTreeSet<u64>> =
            self.tasks.iter().map(|t| (t.id, t.prerequisites())).collect();
        let mut stages = Vec::new();
        while !remaining.is_empty() {
            let ready: Vec<u64> = remaining
                .iter()
                .filter(|(_, prereqs)| prereqs.is_empty())
                .map(|(&id, _)| id)
                .collect();
            if ready.is_empty() {
                return Err(TaskGraphError::Cycle(remaining.into_keys().collect()));
            }
            for id in &ready {
                remaining.remove(id);
            }
            for prereqs in remaining.values_mut() {
                for id in &ready {
                    prereqs.remove(id);
                }
            }
            stages.push(ready);
        }
        Ok(stages)
    }
}

impl Serialize for TaskGraph {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.tasks.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TaskGraph {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Vec::<Task>::deserialize(deserializer).map(TaskGraph::new)
    }
}

/// Argument object decoded entry by entry so duplicate keys can be noticed.
struct RawArgs(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawArgs {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ArgsVisitor;

        impl<'de> Visitor<'de> for ArgsVisitor {
            type Value = RawArgs;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("an object of task arguments")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<RawArgs, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    entries.push((k, v));
                }
                Ok(RawArgs(entries))
            }
        }

        deserializer.deserialize_map(ArgsVisitor)
    }
}

#[derive(Deserialize)]
struct RawTask {
    task: Option<Value>,
    id: Option<Value>,
    dep: Option<Value>,
    args: Option<RawArgs>,
}

fn decode_task(
    index: usize,
    raw: &RawValue,
    manifest: &TaskManifest,
    warnings: &mut Vec<String>,
) -> Result<Task, TaskGraphError> {
    let err = |msg: String| TaskGraphError::Parse(format!("task #{index}: {msg}"));
    let raw: RawTask = serde_json::from_str(raw.get()).map_err(|e| err(e.to_string()))?;

    let name = match raw.task {
        Some(Value::String(s)) => s,
        Some(other) => return Err(err(format!("\"task\" must be a string, got {other}"))),
        None => return Err(err("missing slot \"task\"".into())),
    };
    let id = match raw.id {
        Some(v) => v
            .as_u64()
            .ok_or_else(|| err(format!("\"id\" must be a non-negative integer, got {v}")))?,
        None => return Err(err("missing slot \"id\"".into())),
    };
    let dep = match raw.dep {
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_i64()
                    .ok_or_else(|| err(format!("\"dep\" entries must be integers, got {v}")))
            })
            .collect::<Result<Vec<_>, _>>()?,
        Some(other) => return Err(err(format!("\"dep\" must be an array, got {other}"))),
        None => return Err(err("missing slot \"dep\"".into())),
    };
    let raw_args = raw.args.ok_or_else(|| err("missing slot \"args\"".into()))?;

    let mut args = BTreeMap::new();
    for (key, value) in raw_args.0 {
        let kind: ArgKind = key.parse().map_err(err)?;
        let value = match value {
            Value::String(s) => s,
            other => return Err(err(format!("argument {key:?} must be a string, got {other}"))),
        };
        if args.insert(kind, value).is_some() {
            warnings.push(format!(
                "task {id}: duplicate argument key {key:?}; keeping the last value"
            ));
        }
    }

    if !manifest.contains(&name) {
        return Err(TaskGraphError::UnknownTask { task: name, id });
    }
    Ok(Task {
        task: name,
        id,
        dep,
        args,
    })
}

/// Extracts the first well-formed JSON array from controller output and
/// decodes it into a plan. Prose around the array is ignored.
pub fn parse_plan(raw: &str, manifest: &TaskManifest) -> Result<TaskGraph, TaskGraphError> {
    let span = jsonscan::first_json_array(raw)
        .ok_or_else(|| TaskGraphError::Parse("no JSON array found in controller output".into()))?;
    let elements: Vec<&RawValue> = serde_json::from_str(span).map_err(|e| TaskGraphError::Parse(e.to_string()))?;
    let mut warnings = Vec::new();
    let tasks = elements
        .into_iter()
        .enumerate()
        .map(|(i, raw)| decode_task(i, raw, manifest, &mut warnings))
        .collect::<Result<Vec<_>, _>>()?;
    let mut graph = TaskGraph::new(tasks);
    graph.warnings = warnings;
    Ok(graph)
}
