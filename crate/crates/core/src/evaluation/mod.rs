//! Task-planning evaluation: per-example metrics, critic judgments,
//! execution passing rate and the benchmark runner.

mod dataset;
pub mod metrics;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

pub use dataset::{load_dataset, parse_dataset, Category, DatasetError, EvalExample};
pub use metrics::{
    edit_distance, multiset_prf, normalized_edit_distance, single_match, structural_match, structure, CategoryError,
    Prf,
};

use crate::controller::{BackendError, ChatSession, Choice, Controller, ControllerError, DemoConfig};
use crate::executor::{ArtifactSink, Executor};
use crate::registry::{Assignment, SelectionConfig, SelectionMethod};
use crate::taskgraph::{parse_plan, validate, TaskGraph, TaskManifest};

/// Produces a plan for an evaluation example.
#[async_trait]
pub trait Planner: Send + Sync {
    async fn plan(&self, example: &EvalExample) -> Result<TaskGraph, String>;
}

/// Returns the gold plan; the metric ceiling.
pub struct GoldEcho;

#[async_trait]
impl Planner for GoldEcho {
    async fn plan(&self, example: &EvalExample) -> Result<TaskGraph, String> {
        Ok(example.gold.clone())
    }
}

/// Always plans nothing.
pub struct EmptyPlanner;

#[async_trait]
impl Planner for EmptyPlanner {
    async fn plan(&self, _: &EvalExample) -> Result<TaskGraph, String> {
        Ok(TaskGraph::empty())
    }
}

/// Replays raw controller output recorded per request.
pub struct FixturePlanner {
    plans: HashMap<String, String>,
    manifest: Arc<TaskManifest>,
}

impl FixturePlanner {
    pub fn new(plans: HashMap<String, String>, manifest: Arc<TaskManifest>) -> Self {
        Self { plans, manifest }
    }
}

#[async_trait]
impl Planner for FixturePlanner {
    async fn plan(&self, example: &EvalExample) -> Result<TaskGraph, String> {
        let raw = self
            .plans
            .get(&example.request)
            .ok_or_else(|| format!("no fixture plan for {:?}", example.request))?;
        parse_plan(raw, &self.manifest).map_err(|e| e.to_string())
    }
}

/// Plans through the controller, each example in a fresh chat.
pub struct ControllerPlanner {
    controller: Arc<Controller>,
}

impl ControllerPlanner {
    pub fn new(controller: Arc<Controller>) -> Self {
        Self { controller }
    }
}

#[async_trait]
impl Planner for ControllerPlanner {
    async fn plan(&self, example: &EvalExample) -> Result<TaskGraph, String> {
        let chat = ChatSession::new("bench");
        self.controller
            .plan(&example.request, &chat)
            .await
            .map(|o| o.graph)
            .map_err(|e| e.to_string())
    }
}

/// Executes predicted plans against stub experts, assigning every task the
/// top-ranked candidate.
pub struct PassingCheck {
    pub executor: Executor,
    pub selection: SelectionConfig,
    pub artifacts: PathBuf,
}

impl PassingCheck {
    pub async fn passes(&self, index: usize, pred: &TaskGraph) -> bool {
        if pred.is_empty() || !validate(pred, self.executor.manifest()).ok {
            return false;
        }
        let mut assignments = BTreeMap::new();
        for task in pred.tasks() {
            let Ok(candidates) = self.executor.registry().candidates(&task.task, &self.selection) else {
                return false;
            };
            assignments.insert(
                task.id,
                Assignment {
                    task_id: task.id,
                    model_id: candidates[0].model_id.clone(),
                    reason: "top candidate".into(),
                    method: SelectionMethod::Fallback,
                    warning: None,
                },
            );
        }
        let sink = ArtifactSink::new(self.artifacts.join(format!("ex{index:04}")));
        self.executor.execute_graph(pred, &assignments, &sink).await.all_ok()
    }
}

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("critic backend failed: {0}")]
    Backend(#[from] BackendError),
    #[error("critic failed: {0}")]
    Critic(String),
}

/// Asks the critic whether `pred` solves `request`. Unparseable answers count
/// as "no" and return a warning.
pub async fn critic_score(
    critic: &Controller,
    request: &str,
    pred: &TaskGraph,
) -> Result<(bool, Option<String>), BenchmarkError> {
    match critic.judge(request, pred).await {
        Ok(j) => Ok((j.choice == Choice::Yes, None)),
        Err(ControllerError::Parse { message, attempts, .. }) => {
            let w = format!("critic reply unusable after {attempts} attempts: {message}");
            warn!(request, %w, "counting as no");
            Ok((false, Some(w)))
        }
        Err(ControllerError::Backend(e)) => Err(BenchmarkError::Backend(e)),
        Err(e) => Err(BenchmarkError::Critic(e.to_string())),
    }
}

#[derive(Default)]
pub struct BenchmarkOptions {
    /// Echoed into the report; apply it when building the planner.
    pub demos: DemoConfig,
    pub concurrency: usize,
    pub critic: Option<Arc<Controller>>,
    pub passing: Option<PassingCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub index: usize,
    pub request: String,
    pub category: Category,
    pub gold: Vec<String>,
    pub predicted: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan_error: Option<String>,
    pub accurate: bool,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ned: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critic: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub passed: Option<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Aggregates for one category (or `all`). Percentages except `ned`, which
/// stays in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: String,
    pub examples: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ned: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critic_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub passing_rate: Option<f64>,
}

impl CategoryMetrics {
    fn aggregate(name: &str, records: &[&ExampleRecord]) -> Self {
        let n = records.len();
        let pct_count = |c: usize| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 };
        let mean = |f: fn(&ExampleRecord) -> f64| {
            if n == 0 {
                0.0
            } else {
                records.iter().map(|r| f(r)).sum::<f64>() / n as f64
            }
        };
        let precision = 100.0 * mean(|r| r.precision);
        let recall = 100.0 * mean(|r| r.recall);
        let optional = |f: fn(&ExampleRecord) -> Option<bool>| {
            let vals: Vec<bool> = records.iter().filter_map(|r| f(r)).collect();
            (!vals.is_empty()).then(|| 100.0 * vals.iter().filter(|v| **v).count() as f64 / vals.len() as f64)
        };
        Self {
            category: name.to_string(),
            examples: n,
            accuracy: pct_count(records.iter().filter(|r| r.accurate).count()),
            precision,
            recall,
            f1: Prf::from_pr(precision, recall).f1,
            ned: mean(|r| r.ned),
            critic_score: optional(|r| r.critic),
            passing_rate: optional(|r| r.passed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub demos: DemoConfig,
    pub categories: Vec<CategoryMetrics>,
    pub overall: CategoryMetrics,
    pub examples: Vec<ExampleRecord>,
}

impl MetricsReport {
    pub fn category(&self, c: Category) -> Option<&CategoryMetrics> {
        self.categories.iter().find(|m| m.category == c.as_str())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per category plus `all`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,examples,acc,pre,recall,f1,ned,critic_score,passing_rate\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
        for m in self.categories.iter().chain(std::iter::once(&self.overall)) {
            let _ = writeln!(
                out,
                "{},{},{:.2},{:.2},{:.2},{:.2},{:.4},{},{}",
                m.category,
                m.examples,
                m.accuracy,
                m.precision,
                m.recall,
                m.f1,
                m.ned,
                opt(m.critic_score),
                opt(m.passing_rate)
            );
        }
        out
    }
}

async fn evaluate_one(
    index: usize,
    example: &EvalExample,
    planner: &dyn Planner,
    options: &BenchmarkOptions,
) -> Result<ExampleRecord, BenchmarkError> {
    let (pred, plan_error) = match planner.plan(example).await {
        Ok(g) => (g, None),
        Err(e) => (TaskGraph::empty(), Some(e)),
    };
    let gold_types = example.gold_types();
    let pred_types: Vec<&str> = pred.tasks().iter().map(|t| t.task.as_str()).collect();
    let prf = multiset_prf(&pred_types, &gold_types);
    let accurate = match example.category {
        Category::Single => single_match(&pred, &example.gold).unwrap_or(false),
        _ => structural_match(&pred, &example.gold),
    };
    let mut warnings = Vec::new();
    let critic = match &options.critic {
        Some(c) => {
            let (yes, w) = critic_score(c, &example.request, &pred).await?;
            warnings.extend(w);
            Some(yes)
        }
        None => None,
    };
    let passed = match &options.passing {
        Some(p) => Some(p.passes(index, &pred).await),
        None => None,
    };
    Ok(ExampleRecord {
        index,
        request: example.request.clone(),
        category: example.category,
        gold: gold_types.iter().map(|s| s.to_string()).collect(),
        predicted: pred_types.iter().map(|s| s.to_string()).collect(),
        plan_error,
        accurate,
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        ned: normalized_edit_distance(&pred_types, &gold_types),
        critic,
        passed,
        warnings,
    })
}

/// Evaluates every example and aggregates per category.
pub async fn run_benchmark(
    examples: &[EvalExample],
    planner: &dyn Planner,
    options: &BenchmarkOptions,
) -> Result<MetricsReport, BenchmarkError> {
    let records: Vec<ExampleRecord> = stream::iter(examples.iter().enumerate())
        .map(|(i, ex)| evaluate_one(i, ex, planner, options))
        .buffered(options.concurrency.max(1))
        .collect::<Vec<_>>()
        .await
        .into_iter()
        .collect::<Result<_, _>>()?;

    let categories = Category::ALL
        .iter()
        .filter_map(|c| {
            let rs: Vec<&ExampleRecord> = records.iter().filter(|r| r.category == *c).collect();
            (!rs.is_empty()).then(|| CategoryMetrics::aggregate(c.as_str(), &rs))
        })
        .collect();
    let overall = CategoryMetrics::aggregate("all", &records.iter().collect::<Vec<_>>());
    Ok(MetricsReport {
        demos: options.demos,
        categories,
        overall,
        examples: records,
    })
}
