//! JSON-lines evaluation datasets.
//!
//! One example per line: `{"request", "category", "gold_tasks": [{task, id, dep, args?}]}`.
//! Blank lines and lines starting with `#` are skipped.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taskgraph::{Task, TaskGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Single,
    Sequential,
    Graph,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Single, Category::Sequential, Category::Graph];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Single => "single",
            Category::Sequential => "sequential",
            Category::Graph => "graph",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalExample {
    pub request: String,
    pub category: Category,
    pub gold: TaskGraph,
}

impl EvalExample {
    pub fn gold_types(&self) -> Vec<&str> {
        self.gold.tasks().iter().map(|t| t.task.as_str()).collect()
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("cannot read dataset {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    request: String,
    category: Category,
    gold_tasks: Vec<Task>,
}

/// Checks that the gold plan's shape fits its declared category.
fn check_category(category: Category, gold: &TaskGraph) -> Result<(), String> {
    let stages = gold.stages().map_err(|e| format!("gold plan is not a DAG: {e}"))?;
    match category {
        Category::Single if gold.len() != 1 => Err(format!("single example has {} gold tasks", gold.len())),
        Category::Sequential if stages.iter().any(|s| s.len() > 1) => {
            Err("sequential example has parallel gold tasks".into())
        }
        _ if gold.is_empty() => Err("gold plan is empty".into()),
        _ => Ok(()),
    }
}

pub fn parse_dataset(text: &str) -> Result<Vec<EvalExample>, DatasetError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let malformed = |message: String| DatasetError::Malformed { line, message };
        let parsed: Line = serde_json::from_str(raw).map_err(|e| malformed(e.to_string()))?;
        let gold = TaskGraph::new(parsed.gold_tasks);
        check_category(parsed.category, &gold).map_err(malformed)?;
        out.push(EvalExample {
            request: parsed.request,
            category: parsed.category,
            gold,
        });
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<EvalExample>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text)
}
