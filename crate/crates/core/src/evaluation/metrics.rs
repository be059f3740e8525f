//! Planning-quality metrics over task-type sequences. All pure.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taskgraph::TaskGraph;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("expected a single-task gold plan, got {0} tasks")]
pub struct CategoryError(pub usize);

/// Precision, recall and F1 as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

/// True iff `pred` is exactly one task with the gold task's name.
pub fn single_match(pred: &TaskGraph, gold: &TaskGraph) -> Result<bool, CategoryError> {
    if gold.len() != 1 {
        return Err(CategoryError(gold.len()));
    }
    Ok(pred.len() == 1 && pred.tasks()[0].task == gold.tasks()[0].task)
}

/// Precision/recall/F1 of two multisets; the intersection counts repeats.
pub fn multiset_prf<T: Eq + Hash>(pred: &[T], gold: &[T]) -> Prf {
    let mut remaining: HashMap<&T, usize> = HashMap::new();
    for g in gold {
        *remaining.entry(g).or_default() += 1;
    }
    let mut common = 0usize;
    for p in pred {
        if let Some(n) = remaining.get_mut(p).filter(|n| **n > 0) {
            *n -= 1;
            common += 1;
        }
    }
    let ratio = |d: usize| if d == 0 { 0.0 } else { common as f64 / d as f64 };
    Prf::from_pr(ratio(pred.len()), ratio(gold.len()))
}

/// Token-level Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the longer length; 0 when both are empty.
pub fn normalized_edit_distance<T: PartialEq>(pred: &[T], gold: &[T]) -> f64 {
    let longest = pred.len().max(gold.len());
    if longest == 0 {
        return 0.0;
    }
    edit_distance(pred, gold) as f64 / longest as f64
}

/// Plan shape with ids replaced by list positions: `(task type, sorted
/// prerequisite positions)` per task. Dependencies on unknown ids map to
/// `usize::MAX` so they never match a well-formed gold.
pub fn structure(graph: &TaskGraph) -> Vec<(String, Vec<usize>)> {
    let pos: HashMap<u64, usize> = graph.tasks().iter().enumerate().map(|(i, t)| (t.id, i)).collect();
    graph
        .tasks()
        .iter()
        .map(|t| {
            let mut deps: Vec<usize> = t
                .prerequisites()
                .iter()
                .map(|d| pos.get(d).copied().unwrap_or(usize::MAX))
                .collect();
            deps.sort_unstable();
            (t.task.clone(), deps)
        })
        .collect()
}

/// Exact match of task types and dependency shape, ids normalized.
pub fn structural_match(pred: &TaskGraph, gold: &TaskGraph) -> bool {
    structure(pred) == structure(gold)
}
