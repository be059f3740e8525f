use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{placeholder_target, ArgKind, Task};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ResolveError {
    #[error("no resources recorded for task {0}")]
    MissingResource(u64),
    #[error("task {task} produced no {kind} resource")]
    KindMismatch { task: u64, kind: ArgKind },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("resources of task {0} were already recorded")]
pub struct StoreError(pub u64);

/// Resources produced by finished tasks, keyed by task id. Each id is written
/// at most once.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResourceStore {
    produced: BTreeMap<u64, BTreeMap<ArgKind, String>>,
}

impl ResourceStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, task: u64, resources: BTreeMap<ArgKind, String>) -> Result<(), StoreError> {
        if self.produced.contains_key(&task) {
            return Err(StoreError(task));
        }
        self.produced.insert(task, resources);
        Ok(())
    }

    pub fn get(&self, task: u64) -> Option<&BTreeMap<ArgKind, String>> {
        self.produced.get(&task)
    }

    pub fn contains(&self, task: u64) -> bool {
        self.produced.contains_key(&task)
    }

    pub fn len(&self) -> usize {
        self.produced.len()
    }

    pub fn is_empty(&self) -> bool {
        self.produced.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&u64, &BTreeMap<ArgKind, String>)> {
        self.produced.iter()
    }
}

/// Replaces every `<resource>-N` argument with the resource of the same kind
/// produced by task `N`. Other values pass through unchanged.
pub fn resolve_args(task: &Task, store: &ResourceStore) -> Result<BTreeMap<ArgKind, String>, ResolveError> {
    task.args
        .iter()
        .map(|(&kind, value)| {
            let resolved = match placeholder_target(value) {
                None => value.clone(),
                Some(source) => store
                    .get(source)
                    .ok_or(ResolveError::MissingResource(source))?
                    .get(&kind)
                    .cloned()
                    .ok_or(ResolveError::KindMismatch { task: source, kind })?,
            };
            Ok((kind, resolved))
        })
        .collect()
}
