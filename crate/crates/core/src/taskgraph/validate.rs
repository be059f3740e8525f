use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize, Serializer};

use super::{is_malformed_placeholder, TaskGraph, TaskManifest, NO_DEPENDENCY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    DuplicateId,
    InvalidDependency,
    UnknownDependency,
    Cycle,
    UnknownTask,
    MissingArgument,
    UnexpectedArgument,
    DanglingPlaceholder,
    MalformedPlaceholder,
}

/// Where a violation sits: a single task or the plan as a whole.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Task(u64),
    Plan(PlanMarker),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMarker {
    Plan,
}

impl Serialize for Target {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Target::Task(id) => s.serialize_u64(*id),
            Target::Plan(_) => s.serialize_str("plan"),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Task(id) => write!(f, "task {id}"),
            Target::Plan(_) => f.write_str("plan"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub target: Target,
    pub rule: Rule,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn from_violations(violations: Vec<Violation>) -> Self {
        Self {
            ok: violations.is_empty(),
            violations,
        }
    }

    pub fn has(&self, rule: Rule) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }
}

/// Checks every structural rule of a plan and reports all violations.
pub fn validate(graph: &TaskGraph, manifest: &TaskManifest) -> ValidationReport {
    let mut out = Vec::new();
    let mut push = |target: Target, rule: Rule, message: String| out.push(Violation { target, rule, message });

    let mut ids = BTreeSet::new();
    for task in graph.tasks() {
        if !ids.insert(task.id) {
            push(
                Target::Task(task.id),
                Rule::DuplicateId,
                format!("id {} is used by more than one task", task.id),
            );
        }
    }

    for task in graph.tasks() {
        let here = Target::Task(task.id);
        for &d in &task.dep {
            if d == NO_DEPENDENCY {
                continue;
            }
            if d < 0 {
                push(here, Rule::InvalidDependency, format!("dependency {d} is negative"));
            } else if !ids.contains(&(d as u64)) {
                push(here, Rule::UnknownDependency, format!("dependency {d} names no task"));
            }
        }

        match manifest.get(&task.task) {
            None => push(
                here,
                Rule::UnknownTask,
                format!("{:?} is not a supported task", task.task),
            ),
            Some(spec) => {
                for kind in &spec.args {
                    if !task.args.contains_key(kind) {
                        push(
                            here,
                            Rule::MissingArgument,
                            format!("{} requires argument {kind:?}", task.task, kind = kind.as_str()),
                        );
                    }
                }
                for kind in task.args.keys() {
                    if !spec.args.contains(kind) {
                        push(
                            here,
                            Rule::UnexpectedArgument,
                            format!("{} takes no argument {:?}", task.task, kind.as_str()),
                        );
                    }
                }
            }
        }

        let prereqs = task.prerequisites();
        for (kind, value) in &task.args {
            if is_malformed_placeholder(value) {
                push(
                    here,
                    Rule::MalformedPlaceholder,
                    format!(
                        "argument {:?} value {value:?} is not of the form <resource>-N",
                        kind.as_str()
                    ),
                );
            }
        }
        for (kind, target) in task.placeholders() {
            if !prereqs.contains(&target) {
                push(
                    here,
                    Rule::DanglingPlaceholder,
                    format!(
                        "argument {:?} refers to <resource>-{target} but {target} is not in dep",
                        kind.as_str()
                    ),
                );
            }
        }
    }

    let on_cycle = cyclic_tasks(graph, &ids);
    if !on_cycle.is_empty() {
        push(
            Target::Plan(PlanMarker::Plan),
            Rule::Cycle,
            format!("dependency cycle through tasks {on_cycle:?}"),
        );
    }

    ValidationReport::from_violations(out)
}

/// Ids lying on at least one dependency cycle. Unknown dependencies are
/// ignored here; they are reported separately.
fn cyclic_tasks(graph: &TaskGraph, ids: &BTreeSet<u64>) -> Vec<u64> {
    let mut prereqs: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    for task in graph.tasks() {
        prereqs
            .entry(task.id)
            .or_default()
            .extend(task.prerequisites().into_iter().filter(|p| ids.contains(p)));
    }

    // Peel off everything Kahn's algorithm can schedule; what is left is on
    // a cycle or downstream of one.
    let mut remaining = prereqs.clone();
    loop {
        let ready: Vec<u64> = remaining
            .iter()
            .filter(|(_, p)| p.iter().all(|d| !remaining.contains_key(d)))
            .map(|(&id, _)| id)
            .collect();
        if ready.is_empty() {
            break;
        }
        for id in ready {
            remaining.remove(&id);
        }
    }

    remaining
        .keys()
        .copied()
        .filter(|&start| {
            let mut stack: Vec<u64> = remaining[&start].iter().copied().collect();
            let mut seen = BTreeSet::new();
            while let Some(node) = stack.pop() {
                if node == start {
                    return true;
                }
                if seen.insert(node) {
                    if let Some(next) = remaining.get(&node) {
                        stack.extend(next.iter().copied());
                    }
                }
            }
            false
        })
        .collect()
}
