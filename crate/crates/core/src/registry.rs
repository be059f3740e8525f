//! Expert-model descriptors and the model-selection protocol: filter by task
//! type, rank by downloads, keep the top K, then let the controller choose.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::controller::{BackendError, Controller, ControllerError, PromptError};
use crate::executor::Endpoint;
use crate::taskgraph::{Task, TaskManifest};

const SAMPLE_REGISTRY: &str = include_str!("../assets/registry.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub model_id: String,
    pub task_types: BTreeSet<String>,
    pub downloads: u64,
    #[serde(default)]
    pub description: String,
    pub endpoint: Endpoint,
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("model {0:?} is listed more than once")]
    DuplicateModel(String),
    #[error("registry schema error: {0}")]
    Schema(String),
    #[error("cannot read registry {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectError {
    #[error("no model supports task type {0:?}")]
    NoModel(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Deserialize)]
struct RegistryFile {
    models: Vec<ModelDescriptor>,
}

/// An immutable snapshot of the available expert models.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Registry {
    models: Vec<ModelDescriptor>,
}

impl Registry {
    pub fn new(models: Vec<ModelDescriptor>, manifest: &TaskManifest) -> Result<Self, RegistryError> {
        let mut seen = HashSet::new();
        for m in &models {
            if !seen.insert(m.model_id.as_str()) {
                return Err(RegistryError::DuplicateModel(m.model_id.clone()));
            }
            if m.task_types.is_empty() {
                return Err(RegistryError::Schema(format!(
                    "model {:?} lists no task types",
                    m.model_id
                )));
            }
            if let Some(unknown) = m.task_types.iter().find(|t| !manifest.contains(t)) {
                return Err(RegistryError::Schema(format!(
                    "model {:?} lists unknown task type {unknown:?}",
                    m.model_id
                )));
            }
        }
        Ok(Self { models })
    }

    pub fn from_json(text: &str, manifest: &TaskManifest) -> Result<Self, RegistryError> {
        let file: RegistryFile = serde_json::from_str(text).map_err(|e| RegistryError::Schema(e.to_string()))?;
        Self::new(file.models, manifest)
    }

    pub fn load(path: &Path, manifest: &TaskManifest) -> Result<Self, RegistryError> {
        let text = std::fs::read_to_string(path).map_err(|source| RegistryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, manifest)
    }

    /// The packaged sample registry (one or two well-known models per task).
    pub fn sample(manifest: &TaskManifest) -> Self {
        Self::from_json(SAMPLE_REGISTRY, manifest).expect("packaged registry is valid")
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn models(&self) -> &[ModelDescriptor] {
        &self.models
    }

    pub fn get(&self, model_id: &str) -> Option<&ModelDescriptor> {
        self.models.iter().find(|m| m.model_id == model_id)
    }

    /// Models supporting `task_type`, most downloaded first (ties by id),
    /// truncated to `config.k`.
    pub fn candidates(&self, task_type: &str, config: &SelectionConfig) -> Result<Vec<&ModelDescriptor>, SelectError> {
        let mut matching: Vec<&ModelDescriptor> = self
            .models
            .iter()
            .filter(|m| m.task_types.contains(task_type))
            .collect();
        if matching.is_empty() {
            return Err(SelectError::NoModel(task_type.to_string()));
        }
        matching.sort_by(|a, b| b.downloads.cmp(&a.downloads).then_with(|| a.model_id.cmp(&b.model_id)));
        matching.truncate(config.k.max(1));
        Ok(matching)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    /// Candidate-list cap.
    pub k: usize,
    /// Skip the controller when only one model matches.
    pub short_circuit_single: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            k: 5,
            short_circuit_single: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    LlmChoice,
    ShortCircuit,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub task_id: u64,
    pub model_id: String,
    pub reason: String,
    pub method: SelectionMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Assigns a model to `task`: short-circuit on a single candidate, otherwise
/// an in-context single choice by the controller, falling back to the top
/// ranked candidate when the answer is unusable.
pub async fn select(
    task: &Task,
    request: &str,
    registry: &Registry,
    controller: &Controller,
    config: &SelectionConfig,
) -> Result<Assignment, SelectError> {
    let candidates = registry.candidates(&task.task, config)?;
    let top = candidates[0];
    if config.short_circuit_single && candidates.len() == 1 {
        return Ok(Assignment {
            task_id: task.id,
            model_id: top.model_id.clone(),
            reason: "only one model supports this task".into(),
            method: SelectionMethod::ShortCircuit,
            warning: None,
        });
    }

    let fallback = |warning: String| {
        warn!(task = task.id, %warning, "falling back to the most downloaded candidate");
        Assignment {
            task_id: task.id,
            model_id: top.model_id.clone(),
            reason: "most downloaded candidate".into(),
            method: SelectionMethod::Fallback,
            warning: Some(warning),
        }
    };

    match controller.choose_model(request, task, &candidates).await {
        Ok(choice) if candidates.iter().any(|m| m.model_id == choice.id) => Ok(Assignment {
            task_id: task.id,
            model_id: choice.id,
            reason: choice.reason,
            method: SelectionMethod::LlmChoice,
            warning: None,
        }),
        Ok(choice) => Ok(fallback(format!(
            "controller chose {:?}, which is not a candidate",
            choice.id
        ))),
        Err(ControllerError::Parse { message, attempts, .. }) => Ok(fallback(format!(
            "no usable choice after {attempts} attempts: {message}"
        ))),
        Err(ControllerError::Backend(e)) => Err(SelectError::Backend(e)),
        Err(ControllerError::Prompt(e)) => Err(SelectError::Prompt(e)),
        Err(other) => Ok(fallback(other.to_string())),
    }
}
