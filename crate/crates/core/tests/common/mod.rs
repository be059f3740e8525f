#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use conductor_core::controller::{Controller, ControllerConfig, LlmBackend, ScriptedBackend};
use conductor_core::executor::Executor;
use conductor_core::registry::{Registry, SelectionConfig};
use conductor_core::service::{Engine, Service, SessionStore};
use conductor_core::taskgraph::TaskManifest;

pub const DESCRIBE_REQUEST: &str = "Can you describe this picture and count how many objects in the picture?";
pub const POSE_REQUEST: &str = "Please generate an image where a girl is reading a book, and her pose is the same as the boy in the image example.jpg. Then please describe the new image with your voice.";

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn manifest() -> Arc<TaskManifest> {
    Arc::new(TaskManifest::builtin())
}

pub fn demo_backend() -> ScriptedBackend {
    ScriptedBackend::load(&fixture("demo_script.json")).expect("demo script loads")
}

pub fn controller(backend: Arc<dyn LlmBackend>) -> Arc<Controller> {
    Arc::new(Controller::new(backend, ControllerConfig::default(), manifest()).unwrap())
}

pub fn stub_executor() -> Executor {
    let m = manifest();
    let r = Arc::new(Registry::sample(&m));
    Executor::with_stubs(m, r)
}

/// A service over the sample registry and built-in stubs.
pub fn service(backend: Arc<dyn LlmBackend>, root: &Path) -> Service {
    let engine = Engine::new(controller(backend), stub_executor(), SelectionConfig::default());
    Service::new(engine, SessionStore::open(root).unwrap())
}

pub mod dags {
    use conductor_core::taskgraph::{placeholder, ArgKind, Task, TaskGraph};
    use proptest::prelude::*;

    /// Text-in/text-out task types, so any wiring is executable by stubs.
    pub const TEXT_TASKS: [&str; 5] = [
        "summarization",
        "translation",
        "text-generation",
        "text2text-generation",
        "question-answering",
    ];

    /// Random DAGs with up to `max` nodes, shuffled list order and
    /// non-contiguous ids. Each task's text argument points at its first
    /// prerequisite, or is a literal for roots.
    pub fn dag_strategy(max: usize) -> impl Strategy<Value = TaskGraph> {
        (1..=max)
            .prop_flat_map(|n| {
                (
                    Just(n),
                    proptest::collection::vec(proptest::bool::weighted(0.3), n * n),
                    Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
                    0u64..50,
                    proptest::collection::vec(0..TEXT_TASKS.len(), n),
                )
            })
            .prop_map(|(n, mask, order, offset, types)| {
                let id = |k: usize| offset + 3 * k as u64;
                let tasks = order
                    .iter()
                    .map(|&k| {
                        let deps: Vec<u64> = (0..k).filter(|&j| mask[k * n + j]).map(id).collect();
                        let text = deps
                            .first()
                            .map(|d| placeholder(*d))
                            .unwrap_or_else(|| format!("input {k}"));
                        let dep = if deps.is_empty() {
                            vec![-1]
                        } else {
                            deps.iter().map(|d| *d as i64).collect()
                        };
                        Task::new(TEXT_TASKS[types[k]], id(k), dep).with_arg(ArgKind::Text, text)
                    })
                    .collect();
                TaskGraph::new(tasks)
            })
    }
}

/// Independent edit-distance oracle: breadth-first search over the graph of
/// sequences, where each edge is one insertion, deletion or substitution.
pub mod edit_oracle {
    use std::collections::VecDeque;

    pub const ALPHABET: usize = 5;
    pub const MAX_LEN: usize = 6;

    /// Every sequence of length <= MAX_LEN over the alphabet, by index, with
    /// the one-edit neighbourhood of each precomputed.
    pub struct Space {
        offsets: Vec<usize>,
        pub total: usize,
        seqs: Vec<Vec<u8>>,
        adj_start: Vec<u32>,
        adj: Vec<u32>,
    }

    impl Space {
        pub fn new() -> Self {
            let mut offsets = vec![0];
            for len in 0..=MAX_LEN {
                offsets.push(offsets[len] + ALPHABET.pow(len as u32));
            }
            let total = offsets[MAX_LEN + 1];
            let mut space = Self {
                offsets,
                total,
                seqs: Vec::new(),
                adj_start: Vec::new(),
                adj: Vec::new(),
            };
            space.seqs = (0..total).map(|i| space.decode_raw(i)).collect();
            let mut buf = Vec::with_capacity(MAX_LEN + 1);
            for idx in 0..total {
                space.adj_start.push(space.adj.len() as u32);
                let seq = space.seqs[idx].clone();
                for i in 0..seq.len() {
                    buf.clear();
                    buf.extend_from_slice(&seq[..i]);
                    buf.extend_from_slice(&seq[i + 1..]);
                    space.adj.push(space.encode(&buf) as u32);
                    for sym in 0..ALPHABET as u8 {
                        if sym != seq[i] {
                            buf.clear();
                            buf.extend_from_slice(&seq);
                            buf[i] = sym;
                            space.adj.push(space.encode(&buf) as u32);
                        }
                    }
                }
                // Insertions stop at MAX_LEN. Deleting before inserting keeps
                // an optimal script within that bound, so no distance changes.
                if seq.len() < MAX_LEN {
                    for i in 0..=seq.len() {
                        for sym in 0..ALPHABET as u8 {
                            buf.clear();
                            buf.extend_from_slice(&seq[..i]);
                            buf.push(sym);
                            buf.extend_from_slice(&seq[i..]);
                            space.adj.push(space.encode(&buf) as u32);
                        }
                    }
                }
            }
            space.adj_start.push(space.adj.len() as u32);
            space
        }

        pub fn encode(&self, seq: &[u8]) -> usize {
            self.offsets[seq.len()] + seq.iter().fold(0, |acc, &s| acc * ALPHABET + s as usize)
        }

        fn decode_raw(&self, mut idx: usize) -> Vec<u8> {
            let len = (0..=MAX_LEN).rev().find(|&l| self.offsets[l] <= idx).unwrap();
            idx -= self.offsets[len];
            let mut out = vec![0u8; len];
            for slot in out.iter_mut().rev() {
                *slot = (idx % ALPHABET) as u8;
                idx /= ALPHABET;
            }
            out
        }

        pub fn decode(&self, idx: usize) -> &[u8] {
            &self.seqs[idx]
        }

        /// Distances from `source` to every sequence.
        pub fn bfs(&self, source: &[u8]) -> Vec<u8> {
            let mut dist = vec![u8::MAX; self.total];
            let mut queue = VecDeque::with_capacity(self.total);
            let s = self.encode(source);
            dist[s] = 0;
            queue.push_back(s as u32);
            while let Some(cur) = queue.pop_front() {
                let d = dist[cur as usize] + 1;
                let (a, b) = (
                    self.adj_start[cur as usize] as usize,
                    self.adj_start[cur as usize + 1] as usize,
                );
                for &n in &self.adj[a..b] {
                    if dist[n as usize] == u8::MAX {
                        dist[n as usize] = d;
                        queue.push_back(n);
                    }
                }
            }
            dist
        }
    }

    /// Sequences whose symbols appear in first-use order (0, then 0 or 1, ...).
    /// Edit distance only compares symbols for equality, so any pair can be
    /// relabeled to one whose first sequence has this form.
    pub fn canonical_sources(max_len: usize) -> Vec<Vec<u8>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for s in &frontier {
                let used = s.iter().max().map(|m| *m as usize + 1).unwrap_or(0);
                for sym in 0..(used + 1).min(ALPHABET) {
                    let mut t: Vec<u8> = s.clone();
                    t.push(sym as u8);
                    next.push(t);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }
}

pub mod probe {
    use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;
    use std::time::Duration;

    use async_trait::async_trait;
    use conductor_core::executor::{ExpertHandler, ExpertOutput, InferenceRequest, ResourceData};
    use conductor_core::registry::{Assignment, Registry, SelectionConfig, SelectionMethod};
    use conductor_core::taskgraph::{ArgKind, TaskGraph};

    /// A text expert that records dispatch order, checks that every
    /// prerequisite finished first, and tracks peak concurrency.
    pub struct Probe {
        deps: HashMap<u64, BTreeSet<u64>>,
        delay: Duration,
        done: Mutex<HashSet<u64>>,
        pub violations: Mutex<Vec<String>>,
        pub dispatched: Mutex<Vec<u64>>,
        in_flight: AtomicUsize,
        pub peak: AtomicUsize,
    }

    impl Probe {
        pub fn new(graph: &TaskGraph, delay: Duration) -> Self {
            Self {
                deps: graph.tasks().iter().map(|t| (t.id, t.prerequisites())).collect(),
                delay,
                done: Mutex::new(HashSet::new()),
                violations: Mutex::new(Vec::new()),
                dispatched: Mutex::new(Vec::new()),
                in_flight: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
            }
        }

        pub fn output_for(id: u64) -> String {
            format!("out-{id}")
        }
    }

    #[async_trait]
    impl ExpertHandler for Probe {
        async fn infer(&self, request: &InferenceRequest) -> Result<ExpertOutput, String> {
            let id = request.task_id;
            {
                let done = self.done.lock().unwrap();
                let missing: Vec<&u64> = self.deps[&id].iter().filter(|d| !done.contains(d)).collect();
                if !missing.is_empty() {
                    self.violations
                        .lock()
                        .unwrap()
                        .push(format!("{id} started before {missing:?}"));
                }
            }
            self.dispatched.lock().unwrap().push(id);
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            if self.delay.is_zero() {
                tokio::task::yield_now().await;
            } else {
                tokio::time::sleep(self.delay).await;
            }
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            self.done.lock().unwrap().insert(id);
            Ok(ExpertOutput {
                payload: serde_json::json!({"id": id}),
                resources: BTreeMap::from([(ArgKind::Text, ResourceData::Text(Self::output_for(id)))]),
            })
        }
    }

    /// Assigns every task its top-ranked candidate.
    pub fn assign_top(registry: &Registry, graph: &TaskGraph) -> BTreeMap<u64, Assignment> {
        graph
            .tasks()
            .iter()
            .map(|t| {
                let top = registry.candidates(&t.task, &SelectionConfig::default()).unwrap()[0];
                (
                    t.id,
                    Assignment {
                        task_id: t.id,
                        model_id: top.model_id.clone(),
                        reason: "top".into(),
                        method: SelectionMethod::Fallback,
                        warning: None,
                    },
                )
            })
            .collect()
    }
}

/// Scripted sessions shared by the service suite and the acceptance gate.
pub mod scenarios {
    use std::path::Path;
    use std::sync::Arc;

    use conductor_core::controller::{ScriptedBackend, Stage};
    use conductor_core::service::WorkflowTrace;

    pub const DRAW_REQUEST: &str = "Draw a cat sitting on a windowsill.";
    pub const FOLLOW_UP_REQUEST: &str = "What is in the picture you just drew? Describe it in one sentence.";

    /// Where the first turn's image lands under `root`.
    pub fn first_artifact(root: &Path) -> String {
        root.join("s000001").join("turn0-0.png").display().to_string()
    }

    /// Turn one draws; turn two is only planned when the planner prompt
    /// carries the path of the image drawn in turn one.
    pub fn two_turn_backend(root: &Path) -> ScriptedBackend {
        let art = first_artifact(root);
        let follow_up = serde_json::json!([
            {"task": "image-cls", "id": 0, "dep": [-1], "args": {"image": art}},
            {"task": "image-to-text", "id": 1, "dep": [-1], "args": {"image": art}},
        ])
        .to_string();
        ScriptedBackend::new("[]")
            .on_stage_contains(Stage::Planning, art.clone(), follow_up)
            .on_stage_contains(
                Stage::Planning,
                format!("User request: {DRAW_REQUEST}"),
                r#"[{"task": "text-to-image", "id": 0, "dep": [-1], "args": {"text": "a cat sitting on a windowsill"}}]"#,
            )
            .on_stage_contains(
                Stage::Selection,
                r#""task":"image-cls""#,
                r#"{"id": "google/vit-base-patch16-224", "reason": "most downloaded classifier"}"#,
            )
            .on_stage_contains(
                Stage::Selection,
                r#""task":"image-to-text""#,
                r#"{"id": "nlpconnect/vit-gpt2-image-captioning", "reason": "widely used captioner"}"#,
            )
            .on_stage_contains(Stage::Response, format!("User Input: {DRAW_REQUEST}"), "Here is your cat.")
            .on_stage_contains(
                Stage::Response,
                format!("User Input: {FOLLOW_UP_REQUEST}"),
                "The picture shows a cat on a windowsill.",
            )
    }

    /// Runs the two-turn session from scratch in `root` (wiped first).
    pub async fn two_turn_session(root: &Path) -> Vec<WorkflowTrace> {
        let _ = std::fs::remove_dir_all(root);
        let svc = super::service(Arc::new(two_turn_backend(root)), root);
        let s = svc.create_session().unwrap();
        let first = svc.handle_request(&s, DRAW_REQUEST, vec![]).await.unwrap();
        let second = svc.handle_request(&s, FOLLOW_UP_REQUEST, vec![]).await.unwrap();
        vec![first, second]
    }

    /// The six-task pose-guided generation request, from scratch in `root`.
    pub async fn pose_pipeline(root: &Path) -> WorkflowTrace {
        let _ = std::fs::remove_dir_all(root);
        let svc = super::service(Arc::new(super::demo_backend()), root);
        let s = svc.create_session().unwrap();
        svc.handle_request(&s, super::POSE_REQUEST, vec![]).await.unwrap()
    }

    /// Traces with timings masked, serialized for byte comparison.
    pub fn masked(traces: &[WorkflowTrace]) -> String {
        let masked: Vec<WorkflowTrace> = traces.iter().map(WorkflowTrace::without_timings).collect();
        serde_json::to_string(&masked).unwrap()
    }
}

/// Reference demonstrations and rendered stage prompts.
pub mod goldens {
    use std::collections::BTreeMap;
    use std::path::PathBuf;

    use conductor_core::controller::{
        build_response_prompt, build_selection_prompt, ChatSession, Role, ScriptedBackend, Stage,
    };
    use conductor_core::executor::{InferenceResult, Status};
    use conductor_core::registry::{Assignment, Registry, SelectionConfig, SelectionMethod};
    use conductor_core::taskgraph::{placeholder, ArgKind, Task, TaskGraph};

    /// The three default planning demonstrations, verbatim. The reference
    /// text misspells `visual-question-answering` in the second one; the
    /// corrected name is used here.
    pub const DEMOS: [(&str, &str); 3] = [
        (
            "Can you tell me how many objects in e1.jpg?",
            r#"[{"task": "object-detection", "id": 0, "dep": [-1], "args": {"image": "e1.jpg" }}]"#,
        ),
        (
            "In e2.jpg, what's the animal and what's it doing?",
            r#"[{"task": "image-to-text", "id": 0, "dep":[-1], "args": {"image": "e2.jpg" }}, {"task":"image-cls", "id": 1, "dep": [-1], "args": {"image": "e2.jpg" }}, {"task":"object-detection", "id": 2, "dep": [-1], "args": {"image": "e2.jpg" }}, {"task": "visual-question-answering", "id": 3, "dep":[-1], "args": {"text": "what's the animal doing?", "image": "e2.jpg" }}]"#,
        ),
        (
            "First generate a HED image of e3.jpg, then based on the HED image and a text \"a girl reading a book\", create a new image as a response.",
            r#"[{"task": "pose-detection", "id": 0, "dep": [-1], "args": {"image": "e3.jpg" }},  {"task": "pose-text-to-image", "id": 1, "dep": [0], "args": {"text": "a girl reading a book", "image": "<resource>-0" }}]"#,
        ),
    ];

    /// The same plans written out by hand.
    pub fn expected() -> Vec<TaskGraph> {
        let img = |task: &str, id: u64, file: &str| Task::new(task, id, vec![-1]).with_arg(ArgKind::Image, file);
        vec![
            TaskGraph::new(vec![img("object-detection", 0, "e1.jpg")]),
            TaskGraph::new(vec![
                img("image-to-text", 0, "e2.jpg"),
                img("image-cls", 1, "e2.jpg"),
                img("object-detection", 2, "e2.jpg"),
                img("visual-question-answering", 3, "e2.jpg").with_arg(ArgKind::Text, "what's the animal doing?"),
            ]),
            TaskGraph::new(vec![
                img("pose-detection", 0, "e3.jpg"),
                Task::new("pose-text-to-image", 1, vec![0])
                    .with_arg(ArgKind::Text, "a girl reading a book")
                    .with_arg(ArgKind::Image, placeholder(0)),
            ]),
        ]
    }

    /// Sentences each stage prompt must carry word for word.
    pub const ANCHORS: [(Stage, &str); 4] = [
        (Stage::Planning, "The task must be selected from the following options"),
        (Stage::Selection, "The output must be in a strict JSON format"),
        (Stage::Response, "must tell the user the complete file path"),
        (Stage::Critic, "As a critic, your task is to assess"),
    ];

    pub fn snapshot_path(stage: Stage) -> PathBuf {
        super::fixture("prompts").join(format!("{stage}.txt"))
    }

    /// Renders every stage prompt for one fixed scenario, from scratch.
    pub fn render_all() -> BTreeMap<Stage, String> {
        let controller = super::controller(std::sync::Arc::new(ScriptedBackend::new("")));
        let manifest = super::manifest();
        let registry = Registry::sample(&manifest);
        let request = super::DESCRIBE_REQUEST;

        let mut chat = ChatSession::new("s000001");
        chat.push(Role::User, "Show me a picture of a dog.");
        chat.push(Role::Assistant, "Here it is: /artifacts/s000001/turn0-0.png");
        let planning = controller.planning_prompt(request, &chat).unwrap();

        let task = Task::new("object-detection", 2, vec![-1]).with_arg(ArgKind::Image, "example.jpg");
        let candidates = registry.candidates(&task.task, &SelectionConfig::default()).unwrap();
        let selection = build_selection_prompt(controller.prompts(), request, &task, &candidates).unwrap();

        let plan = TaskGraph::new(vec![task.clone()]);
        let assignments = BTreeMap::from([(
            2,
            Assignment {
                task_id: 2,
                model_id: "facebook/detr-resnet-101".into(),
                reason: "most downloads".into(),
                method: SelectionMethod::LlmChoice,
                warning: None,
            },
        )]);
        let results = BTreeMap::from([(
            2,
            InferenceResult {
                task_id: 2,
                task: task.task.clone(),
                model_id: "facebook/detr-resnet-101".into(),
                inputs: task.args.clone(),
                payload: Some(serde_json::json!({"predicted": [{"label": "dog", "score": 0.99}]})),
                produced_resources: BTreeMap::from([(ArgKind::Image, "/artifacts/s000001/turn1-2.png".to_string())]),
                status: Status::Ok,
                duration_ms: 0.0,
            },
        )]);
        let response = build_response_prompt(controller.prompts(), request, &plan, &assignments, &results).unwrap();
        let critic = controller.critic_prompt(request, &plan).unwrap();
        BTreeMap::from([
            (Stage::Planning, planning),
            (Stage::Selection, selection),
            (Stage::Response, response),
            (Stage::Critic, critic),
        ])
    }
}

/// Random registries and a reference ranking for the selection checks.
pub mod ranking {
    use conductor_core::executor::Endpoint;
    use conductor_core::registry::ModelDescriptor;
    use proptest::prelude::*;

    pub const TYPES: [&str; 4] = ["image-cls", "object-detection", "image-to-text", "translation"];

    pub fn model(id: &str, tasks: &[&str], downloads: u64) -> ModelDescriptor {
        ModelDescriptor {
            model_id: id.into(),
            task_types: tasks.iter().map(|s| s.to_string()).collect(),
            downloads,
            description: format!("{id} description"),
            endpoint: Endpoint::local(),
        }
    }

    pub fn registry_strategy() -> impl Strategy<Value = Vec<ModelDescriptor>> {
        // Few distinct download counts so ties are common.
        proptest::collection::vec((proptest::collection::btree_set(0..TYPES.len(), 1..3), 0u64..4), 0..14).prop_map(
            |rows| {
                rows.into_iter()
                    .enumerate()
                    .map(|(i, (types, downloads))| {
                        let names: Vec<&str> = types.iter().map(|t| TYPES[*t]).collect();
                        model(
                            &format!("org/model-{:02}", (i * 7) % 17 + i * 100),
                            &names,
                            downloads * 1000,
                        )
                    })
                    .collect()
            },
        )
    }

    /// Reference ranking: repeatedly take the best remaining model under the
    /// stated order (selection sort).
    pub fn oracle(models: &[ModelDescriptor], task: &str, k: usize) -> Vec<String> {
        let mut pool: Vec<&ModelDescriptor> = models
            .iter()
            .filter(|m| m.task_types.iter().any(|t| t == task))
            .collect();
        let mut out = Vec::new();
        while !pool.is_empty() && out.len() < k.max(1) {
            let mut best = 0;
            for i in 1..pool.len() {
                let (a, b) = (pool[i], pool[best]);
                if a.downloads > b.downloads || (a.downloads == b.downloads && a.model_id < b.model_id) {
                    best = i;
                }
            }
            out.push(pool.remove(best).model_id.clone());
        }
        out
    }
}

/// Planners that break chosen examples of a dataset.
pub mod broken {
    use conductor_core::evaluation::{EvalExample, FixturePlanner};

    pub const CYCLIC: &str = r#"[{"task": "translation", "id": 0, "dep": [1], "args": {"text": "<resource>-1"}},
                     {"task": "summarization", "id": 1, "dep": [0], "args": {"text": "<resource>-0"}}]"#;
    pub const MISSING_ARG: &str =
        r#"[{"task": "visual-question-answering", "id": 0, "dep": [-1], "args": {"image": "x.jpg"}}]"#;
    pub const GARBAGE: &str = "I am not sure what you mean.";

    /// Echoes the gold plan except at `broken`, where one of three
    /// unexecutable answers is given instead.
    pub fn planner(ds: &[EvalExample], broken: &[usize]) -> FixturePlanner {
        let bad = [CYCLIC, MISSING_ARG, GARBAGE];
        let plans = ds
            .iter()
            .enumerate()
            .map(|(i, ex)| {
                let raw = match broken.iter().position(|b| *b == i) {
                    Some(k) => bad[k % bad.len()].to_string(),
                    None => ex.gold.to_json(),
                };
                (ex.request.clone(), raw)
            })
            .collect();
        FixturePlanner::new(plans, super::manifest())
    }
}
