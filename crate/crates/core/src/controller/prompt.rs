//! Stage prompts with `{{ Slot }}` markers and the few-shot demonstrations
//! injected into them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taskgraph::{parse_plan, validate, TaskGraph, TaskManifest};

const PLANNING: &str = include_str!("../../assets/prompts/planning.txt");
const SELECTION: &str = include_str!("../../assets/prompts/selection.txt");
const RESPONSE: &str = include_str!("../../assets/prompts/response.txt");
const CRITIC: &str = include_str!("../../assets/prompts/critic.txt");
const DEMOS: &str = include_str!("../../assets/demos.json");
const CRITIC_DEMOS: &str = include_str!("../../assets/critic_demos.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Planning,
    Selection,
    Response,
    Critic,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Planning, Stage::Selection, Stage::Response, Stage::Critic];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Planning => "planning",
            Stage::Selection => "selection",
            Stage::Response => "response",
            Stage::Critic => "critic",
        }
    }

    fn slots(self) -> &'static [&'static str] {
        match self {
            Stage::Planning => &["Available Task List", "Demonstrations", "Chat Logs", "User Input"],
            Stage::Selection => &["Candidate Models", "User Input", "Task"],
            Stage::Response => &["User Input", "Tasks", "Model Assignment", "Predictions"],
            Stage::Critic => &[
                "Available Task List",
                "Positive Demos",
                "Negative Demos",
                "Input",
                "Output",
            ],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("{stage} prompt: slot {slot:?} has no binding")]
    UnboundSlot { stage: Stage, slot: String },
    #[error("{stage} prompt: unterminated slot marker")]
    Unterminated { stage: Stage },
    #[error("{stage} prompt: unknown slot {slot:?}")]
    UnknownSlot { stage: Stage, slot: String },
    #[error("{stage} prompt needs at least one candidate model")]
    NoCandidates { stage: Stage },
    #[error("invalid demonstration {request:?}: {reason}")]
    InvalidDemonstration { request: String, reason: String },
    #[error("could not load prompt asset: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

/// A stage prompt split into literal text and named slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    stage: Stage,
    body: String,
    pieces: Vec<Piece>,
}

impl PromptTemplate {
    pub fn parse(stage: Stage, body: &str) -> Result<Self, PromptError> {
        let mut pieces = Vec::new();
        let mut rest = body;
        while let Some(open) = rest.find("{{") {
            let after = &rest[open + 2..];
            let close = after.find("}}").ok_or(PromptError::Unterminated { stage })?;
            let name = after[..close].trim();
            if !stage.slots().contains(&name) {
                return Err(PromptError::UnknownSlot {
                    stage,
                    slot: name.to_string(),
                });
            }
            if open > 0 {
                pieces.push(Piece::Text(rest[..open].to_string()));
            }
            pieces.push(Piece::Slot(name.to_string()));
            rest = &after[close + 2..];
        }
        if !rest.is_empty() {
            pieces.push(Piece::Text(rest.to_string()));
        }
        Ok(Self {
            stage,
            body: body.to_string(),
            pieces,
        })
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.pieces.iter().filter_map(|p| match p {
            Piece::Slot(s) => Some(s.as_str()),
            Piece::Text(_) => None,
        })
    }

    /// Substitutes every slot. Bound values have any `{{` broken up so the
    /// output never contains a slot marker.
    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.body.len());
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(name) => {
                    let value = bindings.get(name.as_str()).ok_or_else(|| PromptError::UnboundSlot {
                        stage: self.stage,
                        slot: name.clone(),
                    })?;
                    out.push_str(&neutralize(value));
                }
            }
        }
        Ok(out)
    }
}

fn neutralize(value: &str) -> String {
    let mut s = value.to_string();
    while s.contains("{{") {
        s = s.replace("{{", "{ {");
    }
    s
}

/// The four stage templates.
#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<Stage, PromptTemplate>,
}

impl PromptSet {
    pub fn builtin() -> Self {
        Self::from_bodies([
            (Stage::Planning, PLANNING),
            (Stage::Selection, SELECTION),
            (Stage::Response, RESPONSE),
            (Stage::Critic, CRITIC),
        ])
        .expect("packaged prompts are well-formed")
    }

    fn from_bodies<'a>(bodies: impl IntoIterator<Item = (Stage, &'a str)>) -> Result<Self, PromptError> {
        let templates = bodies
            .into_iter()
            .map(|(stage, body)| Ok((stage, PromptTemplate::parse(stage, body.trim_end_matches('\n'))?)))
            .collect::<Result<_, PromptError>>()?;
        Ok(Self { templates })
    }

    /// Loads `planning.txt`, `selection.txt`, `response.txt` and `critic.txt`
    /// from `dir`; missing files fall back to the packaged text.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let builtin = Self::builtin();
        let mut bodies = Vec::new();
        for stage in Stage::ALL {
            let path = dir.join(format!("{stage}.txt"));
            let body = if path.exists() {
                std::fs::read_to_string(&path).map_err(|e| PromptError::Io(format!("{}: {e}", path.display())))?
            } else {
                builtin.get(stage).body().to_string()
            };
            bodies.push((stage, body));
        }
        Self::from_bodies(bodies.iter().map(|(s, b)| (*s, b.as_str())))
    }

    pub fn get(&self, stage: Stage) -> &PromptTemplate {
        &self.templates[&stage]
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

/// One few-shot example: a request and the plan it should produce.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Demonstration {
    pub request: String,
    pub plan: String,
    pub task_types: BTreeSet<String>,
}

#[derive(Debug, Deserialize)]
struct RawDemo {
    request: String,
    plan: String,
}

impl Demonstration {
    pub fn new(request: &str, plan: &str, manifest: &TaskManifest) -> Result<Self, PromptError> {
        let invalid = |reason: String| PromptError::InvalidDemonstration {
            request: request.to_string(),
            reason,
        };
        let graph = parse_plan(plan, manifest).map_err(|e| invalid(e.to_string()))?;
        let report = validate(&graph, manifest);
        if !report.ok {
            return Err(invalid(format!("{:?}", report.violations)));
        }
        Ok(Self {
            request: request.to_string(),
            plan: plan.to_string(),
            task_types: graph.task_names().into_iter().map(String::from).collect(),
        })
    }

    pub fn graph(&self, manifest: &TaskManifest) -> TaskGraph {
        parse_plan(&self.plan, manifest).expect("demonstrations are validated on construction")
    }
}

/// How many demonstrations to show and how many distinct task types they may
/// span. Both unset means the three default demonstrations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub count: Option<usize>,
    pub variety: Option<usize>,
}

/// The packaged demonstrations: the default three and a wider pool used for
/// count/variety sweeps.
#[derive(Debug, Clone)]
pub struct DemoLibrary {
    default: Vec<Demonstration>,
    pool: Vec<Demonstration>,
}

#[derive(Debug, Deserialize)]
struct DemoFile {
    default: Vec<RawDemo>,
    #[serde(default)]
    pool: Vec<RawDemo>,
}

impl DemoLibrary {
    pub fn builtin(manifest: &TaskManifest) -> Self {
        Self::from_json(DEMOS, manifest).expect("packaged demonstrations are valid")
    }

    pub fn from_json(text: &str, manifest: &TaskManifest) -> Result<Self, PromptError> {
        let file: DemoFile = serde_json::from_str(text).map_err(|e| PromptError::Io(e.to_string()))?;
        let convert = |raw: Vec<RawDemo>| {
            raw.iter()
                .map(|d| Demonstration::new(&d.request, &d.plan, manifest))
                .collect::<Result<Vec<_>, _>>()
        };
        let default = convert(file.default)?;
        let mut pool = default.clone();
        pool.extend(convert(file.pool)?);
        Ok(Self { default, pool })
    }

    pub fn default_demos(&self) -> &[Demonstration] {
        &self.default
    }

    /// Default demonstrations first, then the extra pool.
    pub fn pool(&self) -> &[Demonstration] {
        &self.pool
    }

    /// Walks the pool in order, keeping a demonstration when the union of
    /// task types stays within `variety`, until `count` are kept. The result
    /// may be shorter than requested when the pool runs out.
    pub fn select(&self, config: DemoConfig) -> Vec<Demonstration> {
        if config.count.is_none() && config.variety.is_none() {
            return self.default.clone();
        }
        let count = config.count.unwrap_or(usize::MAX);
        let variety = config.variety.unwrap_or(usize::MAX);
        let mut chosen = Vec::new();
        let mut types: BTreeSet<&str> = BTreeSet::new();
        for demo in &self.pool {
            if chosen.len() >= count {
                break;
            }
            let union: BTreeSet<&str> = types
                .iter()
                .copied()
                .chain(demo.task_types.iter().map(String::as_str))
                .collect();
            if union.len() <= variety {
                types = union;
                chosen.push(demo.clone());
            }
        }
        chosen
    }
}

/// Number of distinct task types across a set of demonstrations.
pub fn demo_variety(demos: &[Demonstration]) -> usize {
    demos
        .iter()
        .flat_map(|d| d.task_types.iter())
        .collect::<BTreeSet<_>>()
        .len()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticExample {
    pub request: String,
    pub plan: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticDemos {
    pub positive: Vec<CriticExample>,
    pub negative: Vec<CriticExample>,
}

impl CriticDemos {
    pub fn builtin() -> Self {
        serde_json::from_str(CRITIC_DEMOS).expect("packaged critic demonstrations are valid")
    }
}

impl Default for CriticDemos {
    fn default() -> Self {
        Self::builtin()
    }
}

pub(crate) fn render_task_list<'a>(names: impl IntoIterator<Item = &'a str>) -> String {
    names.into_iter().collect::<Vec<_>>().join(", ")
}

pub(crate) fn render_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    let lines: Vec<String> = pairs
        .into_iter()
        .map(|(request, plan)| format!("User: {request}\nAssistant: {plan}"))
        .collect();
    if lines.is_empty() {
        "[]".to_string()
    } else {
        format!("\n{}\n", lines.join("\n"))
    }
}
