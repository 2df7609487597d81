use std::collections::BTreeMap;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use kgnlq_core::kg::{build_database, KgEdge, KgNode};
use kgnlq_core::sqlgen::{FaultKind, HttpBackendConfig};
use kgnlq_service::{router, AppConfig, AppState, BackendDef};
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

fn node(i: u64, t: &str, name: &str) -> KgNode {
    KgNode {
        node_index: i,
        node_type: t.into(),
        node_name: name.into(),
        node_source: "T".into(),
        node_source_id: format!("T{i}"),
    }
}

fn edge(r: &str, x: u64, y: u64) -> KgEdge {
    KgEdge {
        relation: r.into(),
        display_relation: r.into(),
        x_index: x,
        y_index: y,
    }
}

struct Server {
    dir: TempDir,
    state: AppState,
    app: Router,
}

fn config_for(dir: &TempDir) -> AppConfig {
    let mut config = AppConfig::new(dir.path().join("kg.sqlite"));
    config.data_dir = dir.path().join("data");
    config.backends = BTreeMap::from([
        ("oracle".to_string(), BackendDef::Oracle),
        (
            "faulty".to_string(),
            BackendDef::Faulty {
                fault: FaultKind::MisspelledColumn,
                only_hops: None,
                repairable: true,
            },
        ),
        (
            "offline".to_string(),
            BackendDef::Http(HttpBackendConfig {
                base_url: "http://127.0.0.1:9/v1".into(),
                timeout_secs: 2,
                max_retries: 0,
                ..Default::default()
            }),
        ),
    ]);
    config.default_backend = Some("oracle".into());
    config.cors_origins = vec!["http://localhost:5173".into()];
    config
}

fn fixture_server() -> Server {
    let dir = tempfile::tempdir().unwrap();
    let nodes = vec![
        node(1, "drug", "aspirin"),
        node(2, "drug", "ibuprofen"),
        node(3, "gene/protein", "PTGS2"),
        node(4, "gene/protein", "PTGS1"),
        node(5, "disease", "headache"),
        node(6, "disease", "fever"),
    ];
    let edges = vec![
        edge("drug_protein", 1, 3),
        edge("drug_protein", 2, 3),
        edge("drug_protein", 2, 4),
        edge("indication", 1, 5),
        edge("indication", 2, 6),
        edge("disease_protein", 5, 3),
    ];
    build_database(&nodes, &edges, dir.path().join("kg.sqlite")).unwrap();
    let config = config_for(&dir);
    let state = AppState::from_config(&config).unwrap();
    let app = router(state.clone(), &config.cors_origins);
    Server { dir, state, app }
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("schemas")
        .join(format!("{name}.schema.json"));
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

fn assert_valid(name: &str, body: &Value) {
    let v = schema(name);
    let errors: Vec<String> = v.iter_errors(body).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}\n{body:#}");
}

async fn send(app: &Router, method: Method, uri: &str, body: Option<&str>) -> (StatusCode, Value, String) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header(header::CONTENT_TYPE, "application/json");
    }
    let req = req
        .body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let text = String::from_utf8(bytes.to_vec()).unwrap();
    let value = serde_json::from_str(&text).unwrap_or(Value::Null);
    (status, value, text)
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let (s, v, _) = send(app, Method::POST, uri, Some(&body.to_string())).await;
    (s, v)
}

#[tokio::test]
async fn ask_fixture_question() {
    let s = fixture_server();
    let (status, body) = post(&s.app, "/api/ask", json!({"question": "Which proteins does aspirin target?"})).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_valid("ask_response", &body);
    assert_eq!(body["answers"], json!(["PTGS2"]));
    assert_eq!(body["attempts"].as_array().unwrap().len(), 1);
    assert_eq!(body["templated_question"], "Which proteins does [DRUG_0] target?");
    assert_eq!(body["bindings"][0]["candidate"]["canonical_name"], "aspirin");
    assert_eq!(body["stopped_because"], "success");
}

#[tokio::test]
async fn ask_rejects_malformed_requests() {
    let s = fixture_server();
    for (body, needle) in [
        (json!({"question": ""}), "empty"),
        (json!({"question": "   "}), "empty"),
        (json!({"q": "x"}), "malformed"),
        (json!({"question": "x", "options": {"colour": 1}}), "unknown field"),
        (json!({"question": "x", "options": {"ner_mode": "psychic"}}), "malformed"),
    ] {
        let (status, resp) = post(&s.app, "/api/ask", body.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert_valid("error", &resp);
        assert!(resp["error"].as_str().unwrap().contains(needle), "{resp}");
    }
    let (status, resp, _) = send(&s.app, Method::POST, "/api/ask", Some("{not json")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_valid("error", &resp);

    let (status, resp) = post(
        &s.app,
        "/api/ask",
        json!({"question": "x", "options": {"backend": "gpt-5"}}),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(
        resp["error"],
        "unknown backend `gpt-5` (available: faulty, offline, oracle)"
    );
}

#[tokio::test]
async fn unreachable_backend_is_503_with_trace() {
    let s = fixture_server();
    let (status, body) = post(
        &s.app,
        "/api/ask",
        json!({"question": "Which proteins does aspirin target?", "options": {"backend": "offline"}}),
    )
    .await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE, "{body}");
    assert_valid("ask_response", &body);
    assert_eq!(body["stopped_because"], "backend_failure");
    assert_eq!(body["attempts"][0]["outcome"]["kind"], "backend_error");
    assert_eq!(body["answers"], json!([]));
}

#[tokio::test]
async fn ask_options_are_applied() {
    let s = fixture_server();
    let q = "Which gene/proteins does the drug aspirin target?";
    let (_, body) = post(&s.app, "/api/ask", json!({"question": q, "options": {"backend": "faulty"}})).await;
    let attempts = body["attempts"].as_array().unwrap();
    assert_eq!(attempts.len(), 2);
    assert_eq!(attempts[0]["outcome"]["kind"], "validation_error");
    assert_eq!(body["answers"], json!(["PTGS2"]));

    let (_, body) = post(
        &s.app,
        "/api/ask",
        json!({"question": q, "options": {"backend": "faulty", "self_correction": false}}),
    )
    .await;
    assert_eq!(body["attempts"].as_array().unwrap().len(), 1);
    assert_eq!(body["answers"], json!([]));

    let (status, body) = post(
        &s.app,
        "/api/ask",
        json!({"question": q, "options": {
            "ner_mode": "oracle",
            "gold_entities": [{"surface": "aspirin", "node_index": 1}]
        }}),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["ner_mode"], "oracle");
    assert_eq!(body["answers"], json!(["PTGS2"]));

    let (status, _) = post(
        &s.app,
        "/api/ask",
        json!({"question": q, "options": {"demo_dataset_id": "f".repeat(64)}}),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn ask_is_idempotent() {
    let s = fixture_server();
    let req = json!({"question": "Which diseases is the drug ibuprofen indicated for?"});
    let (_, mut a) = post(&s.app, "/api/ask", req.clone()).await;
    let (_, mut b) = post(&s.app, "/api/ask", req).await;
    a["timings"] = Value::Null;
    b["timings"] = Value::Null;
    assert_eq!(a, b);
    assert_eq!(a["answers"], json!(["fever"]));
}

#[tokio::test]
async fn schema_endpoint() {
    let s = fixture_server();
    let (status, body, text) = send(&s.app, Method::GET, "/api/schema", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_valid("schema", &body);
    let types: Vec<&str> = body["entity_types"].as_array().unwrap().iter().map(|t| t["name"].as_str().unwrap()).collect();
    assert_eq!(types, ["disease", "drug", "gene/protein"]);
    assert_eq!(body["relations"].as_array().unwrap().len(), 3);
    let (_, _, again) = send(&s.app, Method::GET, "/api/schema", None).await;
    assert_eq!(text, again);
}

#[tokio::test]
async fn schema_of_graph_without_edges() {
    let dir = tempfile::tempdir().unwrap();
    build_database(&[node(1, "drug", "aspirin")], &[], dir.path().join("kg.sqlite")).unwrap();
    let config = config_for(&dir);
    let app = router(AppState::from_config(&config).unwrap(), &[]);
    let (_, body, _) = send(&app, Method::GET, "/api/schema", None).await;
    assert_valid("schema", &body);
    assert_eq!(body["relations"], json!([]));
}

#[tokio::test]
async fn datasets_are_content_addressed() {
    let s = fixture_server();
    let (status, created) = post(&s.app, "/api/datasets", json!({"n_single": 4, "n_two": 2, "seed": 1})).await;
    assert_eq!(status, StatusCode::CREATED, "{created}");
    assert_valid("dataset_created", &created);
    assert_eq!(created["examples"], 6);
    let id = created["id"].as_str().unwrap();

    let (status, ds, _) = send(&s.app, Method::GET, &format!("/api/datasets/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_valid("dataset", &ds);
    assert_eq!(ds["examples"].as_array().unwrap().len(), 6);

    let (_, again) = post(&s.app, "/api/datasets", json!({"n_single": 4, "n_two": 2, "seed": 1})).await;
    assert_eq!(again["id"], id);
    assert!(s.dir.path().join("data/datasets").join(format!("{id}.jsonl")).exists());

    for bogus in ["nope", &"0".repeat(64)] {
        let (status, body, _) = send(&s.app, Method::GET, &format!("/api/datasets/{bogus}"), None).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
        assert_valid("error", &body);
    }

    let (status, partial) = post(&s.app, "/api/datasets", json!({"n_single": 100, "n_two": 100, "seed": 1})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_valid("dataset_created", &partial);
    assert_eq!(partial["partial"], true);
    assert_eq!(partial["warnings"].as_array().unwrap().len(), 2);
    let (status, _, _) = send(
        &s.app,
        Method::GET,
        &format!("/api/datasets/{}", partial["id"].as_str().unwrap()),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::OK);

    let (status, _) = post(&s.app, "/api/datasets", json!({"n_single": -1})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn eval_endpoint() {
    let s = fixture_server();
    let (_, created) = post(&s.app, "/api/datasets", json!({"n_single": 4, "n_two": 2, "seed": 1})).await;
    let id = created["id"].as_str().unwrap();

    let (status, body) = post(&s.app, "/api/eval", json!({"dataset_id": id, "settings": ["full"]})).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_valid("eval_response", &body);
    assert_eq!(body["reports"][0]["overall"]["em"], 1.0);
    let file = body["report_file"].as_str().unwrap();
    assert!(s.dir.path().join("data/reports").join(file).exists());

    let (status, body) = post(
        &s.app,
        "/api/eval",
        json!({"dataset_id": id, "backend": "faulty",
               "settings": ["full", "no-ner", "no-sc", "no-ner-no-sc"]}),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_valid("eval_response", &body);
    let labels: Vec<&str> = body["reports"].as_array().unwrap().iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["Full", "- NER", "- SC", "- NER - SC"]);
    assert!(body["reports"][2]["overall"]["em"].as_f64() < body["reports"][0]["overall"]["em"].as_f64());
    assert_eq!(body["table"].as_str().unwrap().lines().count(), 5);

    let (status, body) = post(
        &s.app,
        "/api/eval",
        json!({"dataset_id": id, "settings": [{"ner": "oracle", "self_correction": false, "backend": "oracle"}]}),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["reports"][0]["label"], "- NER - SC");

    let (status, _) = post(&s.app, "/api/eval", json!({"dataset_id": id, "settings": []})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post(&s.app, "/api/eval", json!({"dataset_id": id, "settings": ["half"]})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post(&s.app, "/api/eval", json!({"dataset_id": "0".repeat(64), "settings": ["full"]})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn health_and_cors() {
    let s = fixture_server();
    let (status, body, _) = send(&s.app, Method::GET, "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_valid("health", &body);
    assert_eq!(body["db_fingerprint"], s.state.db().fingerprint().unwrap());
    assert_eq!(body["backends"].as_array().unwrap().len(), 3);

    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/api/ask")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let resp = s.app.clone().oneshot(req).await.unwrap();
    assert_eq!(
        resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN],
        "http://localhost:5173"
    );
}

#[tokio::test]
async fn requests_never_write_to_the_database() {
    let s = fixture_server();
    let before = s.state.db().fingerprint().unwrap();
    let hostile = [
        "Which proteins does aspirin target?; DROP TABLE nodes",
        "'); DELETE FROM edges; --",
        "Which gene/proteins does the drug aspirin target?",
    ];
    for q in hostile {
        for backend in ["oracle", "faulty"] {
            post(&s.app, "/api/ask", json!({"question": q, "options": {"backend": backend}})).await;
        }
    }
    let (_, created) = post(&s.app, "/api/datasets", json!({"n_single": 4, "n_two": 2, "seed": 1})).await;
    post(
        &s.app,
        "/api/eval",
        json!({"dataset_id": created["id"], "settings": ["full", "no-sc"]}),
    )
    .await;
    // Write probe on the connection type the service uses.
    let conn = s.state.db().connect().unwrap();
    assert!(conn.execute_batch("DELETE FROM edges").is_err());
    drop(conn);
    assert_eq!(s.state.db().fingerprint().unwrap(), before);
}
