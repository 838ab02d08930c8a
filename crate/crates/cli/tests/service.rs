use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use toolforge_cli::{router, AppState};
use toolforge_core::agents::{AgentKind, AutomationType};
use toolforge_core::fixtures::{sample_problems, scripted_config, ScriptBuilder};
use toolforge_core::orchestrator::SessionMode;

async fn send(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = raw(app, method, uri, body, None).await;
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn raw(app: &Router, method: Method, uri: &str, body: Option<Value>, accept: Option<&str>) -> (StatusCode, Vec<u8>) {
    use tower::ServiceExt;
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(a) = accept {
        req = req.header(header::ACCEPT, a);
    }
    let req = match body {
        Some(b) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn until<F, Fut>(what: &str, mut f: F) -> Value
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = Option<Value>>,
{
    let start = Instant::now();
    loop {
        if let Some(v) = f().await {
            return v;
        }
        assert!(start.elapsed() < Duration::from_secs(60), "timed out waiting for {what}");
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
}

async fn finished(app: &Router, id: &str) -> Value {
    until("session end", || async {
        let (_, v) = send(app, Method::GET, &format!("/sessions/{id}"), None).await;
        (v["status"] != "running").then_some(v)
    })
    .await
}

fn clean_config(id: &str, iterations: u64) -> Value {
    let mut b = ScriptBuilder::new();
    for i in 0..iterations {
        b.clean_iteration(&format!("add_intro_{i}"));
    }
    let mut config = scripted_config(b.build(), iterations);
    config.session_id = Some(id.into());
    serde_json::to_value(config).unwrap()
}

fn request_id(session: &str, p: &Value) -> String {
    format!("{session}:{}:{}:{}", p["agent"].as_str().unwrap(), p["step"], p["phase"].as_str().unwrap())
}

fn app_with(store: Option<std::path::PathBuf>) -> Router {
    router(AppState::new(sample_problems(), store))
}

#[tokio::test(flavor = "multi_thread")]
async fn health_reports_version() {
    let (status, v) = send(&app_with(None), Method::GET, "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
}

#[tokio::test(flavor = "multi_thread")]
async fn problems_hide_target_documents() {
    let (_, v) = send(&app_with(None), Method::GET, "/problems", None).await;
    let list = v.as_array().unwrap();
    assert_eq!(list.len(), 2);
    assert!(list.iter().all(|p| p.get("target").is_none() && p["hidden_reference"] == true));
    let body = v.to_string();
    for p in sample_problems() {
        let target = p.target.unwrap();
        for s in target.sections.iter().filter(|s| s.content != target.abstract_text) {
            assert!(!body.contains(&s.content));
        }
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn session_runs_and_streams_monotone_events() {
    let app = app_with(None);
    let (status, v) = send(&app, Method::POST, "/sessions", Some(clean_config("svc-clean", 2))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(v["id"], "svc-clean");
    let (status, _) = send(&app, Method::POST, "/sessions", Some(clean_config("svc-clean", 2))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let done = finished(&app, "svc-clean").await;
    assert_eq!(done["status"], "finished");
    assert_eq!(done["summary"]["iterations"], 2);
    assert_eq!(done["summary"]["validated_tools"], 2);

    let (_, events) = send(&app, Method::GET, "/sessions/svc-clean/events?from=0", None).await;
    let seqs: Vec<u64> = events.as_array().unwrap().iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert_eq!(seqs, (0..seqs.len() as u64).collect::<Vec<_>>());
    assert_eq!(done["summary"]["events"], seqs.len() as u64);
    let (_, tail) = send(&app, Method::GET, "/sessions/svc-clean/events?from=5&wait=1", None).await;
    assert_eq!(tail.as_array().unwrap().len(), seqs.len() - 5);

    let (status, body) = raw(&app, Method::GET, "/sessions/svc-clean/events?from=0", None, Some("text/event-stream")).await;
    assert_eq!(status, StatusCode::OK);
    let text = String::from_utf8(body).unwrap();
    assert!(text.starts_with("id: 0\nevent: session-started\n"), "{}", &text[..80.min(text.len())]);
    assert_eq!(text.matches("\nevent: ").count(), seqs.len());

    let (_, hits) = send(&app, Method::GET, "/tools?query=introduction%20abstract&k=1", None).await;
    let hits = hits.as_array().unwrap();
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0]["session"], "svc-clean");
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_ids_are_not_found() {
    let app = app_with(None);
    for uri in ["/sessions/nope", "/sessions/nope/events", "/sweeps/nope", "/tools?session=nope"] {
        assert_eq!(send(&app, Method::GET, uri, None).await.0, StatusCode::NOT_FOUND, "{uri}");
    }
    let (status, _) = send(&app, Method::POST, "/guidance/nope", Some(json!({"action": "proceed"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn guided_session_waits_for_the_operator() {
    let app = app_with(None);
    let mut config = scripted_config(
        {
            let mut b = ScriptBuilder::new();
            b.clean_iteration("add_intro");
            b.build()
        },
        1,
    );
    config.session_id = Some("svc-guided".into());
    config.mode = SessionMode::Hitl;
    config.agents.coder.automation = AutomationType::FullHuman;
    let (status, _) = send(&app, Method::POST, "/sessions", Some(serde_json::to_value(&config).unwrap())).await;
    assert_eq!(status, StatusCode::CREATED);

    let first = until("a pending request", || async {
        let (_, v) = send(&app, Method::GET, "/guidance/pending", None).await;
        (!v.as_array().unwrap().is_empty()).then_some(v)
    })
    .await;
    let pending = first.as_array().unwrap();
    assert_eq!(pending.len(), 1);
    let request = &pending[0];
    assert_eq!(request["agent"], json!(AgentKind::Coder));
    let id = request["id"].as_str().unwrap().to_owned();
    let uri = format!("/guidance/{}", id.replace(':', "%3A"));

    let illegal = if request["phase"] == "pre-inference" {
        json!({"action": "select", "index": 0})
    } else {
        json!({"action": "proceed"})
    };
    let legal = if request["phase"] == "pre-inference" {
        json!({"action": "proceed", "operator": "alice"})
    } else {
        json!({"action": "select", "index": 0, "operator": "alice"})
    };
    assert_eq!(send(&app, Method::POST, &uri, Some(illegal)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, ack) = send(&app, Method::POST, &uri, Some(legal)).await;
    assert_eq!(status, StatusCode::OK);
    let (status, again) = send(&app, Method::POST, &uri, Some(json!({"action": "restart", "operator": "bob"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ack, again);

    // Any later requests take the proposed default.
    let done = until("session end", || async {
        let (_, v) = send(&app, Method::GET, "/guidance/pending", None).await;
        for r in v.as_array().unwrap() {
            let action = if r["phase"] == "pre-inference" {
                json!({"action": "proceed"})
            } else {
                json!({"action": "select", "index": 0})
            };
            let uri = format!("/guidance/{}", r["id"].as_str().unwrap().replace(':', "%3A"));
            send(&app, Method::POST, &uri, Some(action)).await;
        }
        let (_, s) = send(&app, Method::GET, "/sessions/svc-guided", None).await;
        (s["status"] != "running").then_some(s)
    })
    .await;
    assert_eq!(done["status"], "finished", "{done}");

    let (_, events) = send(&app, Method::GET, "/sessions/svc-guided/events", None).await;
    let resolved: Vec<&Value> = events
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["kind"] == "guidance-resolved" && request_id("svc-guided", &e["payload"]) == id)
        .collect();
    assert_eq!(resolved.len(), 1);
    assert_eq!(resolved[0]["payload"]["decision"]["operator"], "alice");
}

#[tokio::test(flavor = "multi_thread")]
async fn finished_sessions_are_served_from_the_store() {
    let store = tempfile::tempdir().unwrap();
    let app = app_with(Some(store.path().to_owned()));
    send(&app, Method::POST, "/sessions", Some(clean_config("svc-stored", 1))).await;
    let live = finished(&app, "svc-stored").await;
    let fresh = app_with(Some(store.path().to_owned()));
    let (status, stored) = send(&fresh, Method::GET, "/sessions/svc-stored", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(stored["summary"], live["summary"]);
    let (_, events) = send(&fresh, Method::GET, "/sessions/svc-stored/events?from=2", None).await;
    assert_eq!(events[0]["seq"], 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn sweeps_run_in_the_background() {
    let app = app_with(None);
    let mut base: Value = clean_config("svc-sweep", 1);
    base["session_id"] = Value::Null;
    let space = json!({
        "params": [{"name": "max_autofix", "kind": "categorical", "choices": [0, 1]}],
        "trials": 2,
        "seed": 3
    });
    let (status, v) = send(&app, Method::POST, "/sweeps", Some(json!({"space": space, "base": base}))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let id = v["id"].as_str().unwrap().to_owned();
    let done = until("sweep end", || async {
        let (_, v) = send(&app, Method::GET, &format!("/sweeps/{id}"), None).await;
        (v["status"] != "running").then_some(v)
    })
    .await;
    assert_eq!(done["status"], "finished", "{done}");
    let trials = done["report"]["trials"].as_array().unwrap();
    assert_eq!(trials.len(), 2);
    let best = done["report"]["trials"][done["report"]["best"].as_u64().unwrap() as usize]["objective"]
        .as_f64()
        .unwrap();
    assert!(trials.iter().all(|t| t["objective"].as_f64().unwrap() <= best));
    assert!(best > 0.0);

    let bad = json!({"space": {"params": [{"name": "no.such", "kind": "int-range", "lo": 0, "hi": 1}], "trials": 1}});
    assert_eq!(send(&app, Method::POST, "/sweeps", Some(bad)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}
