mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use common::goldens;
use conductor_core::controller::{
    BackendError, ChatSession, Controller, ControllerConfig, DemoConfig, HttpBackend, HttpBackendConfig, Stage,
};
use conductor_core::taskgraph::{parse_plan, TaskManifest};
use serde_json::{json, Value};

#[test]
fn reference_demonstrations_parse_exactly() {
    let m = TaskManifest::builtin();
    for ((_, raw), want) in goldens::DEMOS.iter().zip(goldens::expected()) {
        let got = parse_plan(raw, &m).unwrap();
        assert_eq!(got.len(), want.len());
        for (g, w) in got.tasks().iter().zip(want.tasks()) {
            assert_eq!((&g.task, g.id, &g.dep, &g.args), (&w.task, w.id, &w.dep, &w.args));
        }
    }
    // The misspelled name is not a task type.
    let typo = goldens::DEMOS[1]
        .1
        .replace("visual-question-answering", "visual-quesrion-answering");
    assert!(parse_plan(&typo, &m).is_err());
}

#[test]
fn default_demos_are_the_reference_ones() {
    let c = common::controller(Arc::new(conductor_core::controller::ScriptedBackend::new("")));
    let requests: Vec<&str> = c.demos().iter().map(|d| d.request.as_str()).collect();
    let reference: Vec<&str> = goldens::DEMOS.iter().map(|(r, _)| *r).collect();
    assert_eq!(requests, reference);
    let prompt = c.planning_prompt("hi", &ChatSession::new("s")).unwrap();
    for (request, _) in goldens::DEMOS {
        assert!(prompt.contains(request));
    }
}

#[test]
fn prompts_match_snapshots() {
    let first = goldens::render_all();
    assert_eq!(first, goldens::render_all());
    let update = std::env::var_os("UPDATE_GOLDENS").is_some();
    for (stage, anchor) in goldens::ANCHORS {
        let text = &first[&stage];
        assert!(text.contains(anchor), "{stage}: {anchor}");
        assert!(!text.contains("{{"), "{stage} has an unfilled slot");
        let path = goldens::snapshot_path(stage);
        if update {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, text).unwrap();
        }
        assert_eq!(&std::fs::read_to_string(&path).unwrap(), text, "{stage} prompt drifted");
    }
}

#[test]
fn demo_count_and_variety() {
    let m = Arc::new(TaskManifest::builtin());
    let backend = Arc::new(conductor_core::controller::ScriptedBackend::new(""));
    for count in [0, 1, 5] {
        let cfg = ControllerConfig {
            demos: DemoConfig {
                count: Some(count),
                ..Default::default()
            },
            ..Default::default()
        };
        let c = Controller::new(backend.clone(), cfg, m.clone()).unwrap();
        assert_eq!(c.demos().len(), count);
    }
}

/// Authorization header and JSON body of each request.
type Seen = Arc<Mutex<Vec<(Option<String>, Value)>>>;

#[derive(Clone, Default)]
struct Upstream {
    bodies: Seen,
    hits: Arc<AtomicUsize>,
    /// Status codes served before a successful reply.
    failures: Arc<Mutex<Vec<u16>>>,
}

async fn completions(
    State(up): State<Upstream>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> (StatusCode, Json<Value>) {
    up.hits.fetch_add(1, Ordering::SeqCst);
    let auth = headers.get("authorization").map(|v| v.to_str().unwrap().to_string());
    up.bodies.lock().unwrap().push((auth, body));
    let next = {
        let mut f = up.failures.lock().unwrap();
        (!f.is_empty()).then(|| f.remove(0))
    };
    match next {
        Some(code) => (StatusCode::from_u16(code).unwrap(), Json(json!({"error": "nope"}))),
        None => (
            StatusCode::OK,
            Json(json!({"choices": [{"message": {"role": "assistant", "content": "[]"}}]})),
        ),
    }
}

async fn upstream() -> (Upstream, String) {
    let up = Upstream::default();
    let app = Router::new()
        .route("/v1/chat/completions", post(completions))
        .with_state(up.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (up, format!("http://{addr}/v1"))
}

fn http_controller(base: &str, key: Option<&str>) -> Controller {
    let backend = HttpBackend::with_key(HttpBackendConfig::new(base, "gpt-3.5-turbo"), key.map(String::from)).unwrap();
    Controller::new(
        Arc::new(backend),
        ControllerConfig::default(),
        Arc::new(TaskManifest::builtin()),
    )
    .unwrap()
}

#[tokio::test]
async fn chat_completion_wire_format() {
    let (up, base) = upstream().await;
    let c = http_controller(&base, Some("sk-test"));
    let plan = c
        .plan("Can you tell me how many objects in e9.jpg?", &ChatSession::new("s"))
        .await
        .unwrap();
    assert!(plan.graph.is_empty());
    let (auth, body) = up.bodies.lock().unwrap()[0].clone();
    assert_eq!(auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(body["model"], "gpt-3.5-turbo");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["logit_bias"], json!({"90": 0.2, "92": 0.2}));
    assert_eq!(body["messages"][0]["role"], "user");
    assert!(body["messages"][0]["content"].as_str().unwrap().contains("e9.jpg"));

    let anonymous = http_controller(&base, None);
    anonymous.complete(Stage::Critic, "x".into()).await.unwrap();
    assert_eq!(up.bodies.lock().unwrap()[1].0, None);
}

#[tokio::test]
async fn server_errors_are_retried_but_auth_errors_are_not() {
    let (up, base) = upstream().await;
    let c = http_controller(&base, Some("k"));

    *up.failures.lock().unwrap() = vec![500, 429];
    assert_eq!(c.complete(Stage::Planning, "p".into()).await.unwrap(), "[]");
    assert_eq!(up.hits.swap(0, Ordering::SeqCst), 3);

    *up.failures.lock().unwrap() = vec![503, 503, 503];
    let err = c.complete(Stage::Planning, "p".into()).await.unwrap_err();
    assert!(matches!(err, BackendError::Unavailable { attempts: 3, .. }), "{err:?}");
    assert_eq!(up.hits.swap(0, Ordering::SeqCst), 3);

    *up.failures.lock().unwrap() = vec![401];
    assert!(matches!(
        c.complete(Stage::Planning, "p".into()).await,
        Err(BackendError::Auth(_))
    ));
    assert_eq!(up.hits.swap(0, Ordering::SeqCst), 1);

    *up.failures.lock().unwrap() = vec![400];
    assert!(matches!(
        c.complete(Stage::Planning, "p".into()).await,
        Err(BackendError::Rejected { status: 400, .. })
    ));
    assert_eq!(up.hits.swap(0, Ordering::SeqCst), 1);

    let down = http_controller("http://127.0.0.1:9/v1", None);
    assert!(matches!(
        down.complete(Stage::Planning, "p".into()).await,
        Err(BackendError::Unavailable { attempts: 3, .. })
    ));
}
