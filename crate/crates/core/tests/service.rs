//! HTTP API behaviour over smoke-trained models.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use facemotion::app::service::{router, ServiceState};
use facemotion::app::{InferenceModels, Pipeline, RunConfig};
use facemotion::motion_lm::LmKind;

fn models() -> &'static InferenceModels {
    static MODELS: OnceLock<InferenceModels> = OnceLock::new();
    MODELS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let p = Pipeline::new(RunConfig::smoke(&dir)).unwrap();
        let corpus = p.generate_corpus().unwrap();
        p.train_vqvae(&corpus, |_, _| {}).unwrap();
        p.train_lm(LmKind::M2l, &corpus, |_, _| {}).unwrap();
        p.train_lm(LmKind::L2m, &corpus, |_, _| {}).unwrap();
        p.load_inference().unwrap()
    })
}

fn ready() -> Arc<ServiceState> {
    ServiceState::ready(models().clone(), BTreeMap::from([("vqvae".to_string(), "mem".to_string())]))
}

async fn call(state: Arc<ServiceState>, method: &str, uri: &str, body: &str) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = router(state).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

const PROMPT: &str = "a young woman grinning intensely while nodding";

#[tokio::test]
async fn health_reports_checkpoints() {
    let (s, v) = call(ready(), "GET", "/api/health", "").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["checkpoints"]["vqvae"], "mem");
}

#[tokio::test]
async fn loading_state_is_503() {
    let state = ServiceState::loading(BTreeMap::new());
    let (s, v) = call(state.clone(), "GET", "/api/health", "").await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["status"], "loading");
    let (s, _) = call(state.clone(), "POST", "/api/generate", &json!({ "prompt": PROMPT }).to_string()).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    state.set_failed("boom".into());
    let (s, v) = call(state, "POST", "/api/generate", &json!({ "prompt": PROMPT }).to_string()).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert!(v["error"].as_str().unwrap().contains("boom"));
}

#[tokio::test]
async fn generate_is_seeded_and_well_formed() {
    let body = json!({ "prompt": PROMPT, "seed": 7, "temperature": 1.0, "top_k": 5 }).to_string();
    let (s1, a) = call(ready(), "POST", "/api/generate", &body).await;
    let (s2, b) = call(ready(), "POST", "/api/generate", &body).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a, b);
    let n = a["frames"].as_array().unwrap().len();
    assert_eq!(a["tokens"].as_array().unwrap().len(), n);
    assert_eq!(a["vertices"].as_array().unwrap().len(), n);
    assert!((a["duration_s"].as_f64().unwrap() - n as f64 / 25.0).abs() < 1e-12);
    let v0 = base64::engine::general_purpose::STANDARD.decode(a["vertices"][0].as_str().unwrap()).unwrap();
    assert_eq!(v0.len(), models().face.vertex_count() * 3 * 4);
    let f0 = &a["frames"][0];
    assert_eq!(f0["expr"].as_array().unwrap().len(), 16);
    assert!(f0["yaw"].is_f64() && f0["pitch"].is_f64() && f0["roll"].is_f64());
}

#[tokio::test]
async fn bad_requests_map_to_status_codes() {
    let (s, _) = call(ready(), "POST", "/api/generate", "{not json").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(ready(), "POST", "/api/generate", &json!({ "prompt": "" }).to_string()).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(ready(), "POST", "/api/generate", &json!({ "prompt": " ?! " }).to_string()).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(ready(), "POST", "/api/generate", &json!({ "prompt": PROMPT, "temperature": -1.0 }).to_string()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let frame = json!({ "expr": vec![0.0; 16], "yaw": 0.0, "pitch": 0.0, "roll": 0.0 });
    let long = json!({ "frames": vec![frame.clone(); 151] }).to_string();
    let (s, _) = call(ready(), "POST", "/api/decode", &long).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    let (s, _) = call(ready(), "POST", "/api/describe", &long).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    let (s, _) = call(ready(), "POST", "/api/describe", &json!({ "tokens": vec![0; 151] }).to_string()).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    let (s, _) = call(ready(), "POST", "/api/describe", &json!({ "tokens": [1, 2], "frames": [frame] }).to_string()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(ready(), "POST", "/api/describe", &json!({ "tokens": [100000] }).to_string()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let bad = json!({ "frames": [{ "expr": [0.0], "yaw": 0.0, "pitch": 0.0, "roll": 0.0 }] }).to_string();
    let (s, _) = call(ready(), "POST", "/api/decode", &bad).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn describe_accepts_tokens_or_frames() {
    let (_, gen) = call(ready(), "POST", "/api/generate", &json!({ "prompt": PROMPT }).to_string()).await;
    let (s, by_tokens) = call(ready(), "POST", "/api/describe", &json!({ "tokens": gen["tokens"] }).to_string()).await;
    assert_eq!(s, StatusCode::OK);
    assert!(by_tokens["text"].is_string());
    assert!(by_tokens["keywords"].is_object());
    let body = json!({ "frames": gen["frames"], "question": "What is the person doing?" }).to_string();
    let (s, by_frames) = call(ready(), "POST", "/api/describe", &body).await;
    assert_eq!(s, StatusCode::OK);
    assert!(by_frames["text"].is_string());
}

#[tokio::test]
async fn decode_returns_one_mesh_per_frame() {
    let frame = json!({ "expr": vec![0.1; 16], "yaw": 0.3, "pitch": 0.0, "roll": -0.2 });
    let (s, v) = call(ready(), "POST", "/api/decode", &json!({ "frames": [frame.clone(), frame] }).to_string()).await;
    assert_eq!(s, StatusCode::OK);
    let verts = v["vertices"].as_array().unwrap();
    assert_eq!(verts.len(), 2);
    assert_eq!(verts[0], verts[1]);
}

#[tokio::test]
async fn lexicon_lists_keyword_surfaces() {
    let (s, v) = call(ready(), "GET", "/api/lexicon", "").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["archetypes"].as_array().unwrap().len(), 16);
    assert_eq!(v["motions"].as_array().unwrap().len(), 6);
    assert_eq!(v["intensities"].as_array().unwrap().len(), 3);
    let kws = v["keywords"].as_array().unwrap();
    assert!(kws.iter().any(|k| k["surface"] == "grinning" && k["field"] == "emotion" && k["label"] == "grin"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_are_independent() {
    let state = ready();
    let bodies: Vec<String> = (0..6).map(|seed| json!({ "prompt": PROMPT, "seed": seed, "temperature": 1.0 }).to_string()).collect();
    let mut sequential = Vec::new();
    for b in &bodies {
        sequential.push(call(state.clone(), "POST", "/api/generate", b).await.1);
    }
    let handles: Vec<_> = bodies
        .iter()
        .cloned()
        .map(|b| {
            let st = state.clone();
            tokio::spawn(async move { call(st, "POST", "/api/generate", &b).await.1 })
        })
        .collect();
    for (h, expected) in handles.into_iter().zip(&sequential) {
        assert_eq!(&h.await.unwrap(), expected);
    }
}
