use std::collections::HashSet;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use dtc_core::model::{Encoders, GanNets, Model};
use dtc_core::scene::{build_dataset, DatasetManifest, SceneConfig, SplitRatios};
use dtc_core::trainer::build_vocab;
use dtc_core::TrainConfig;
use dtc_service::{reason, router, AppState, ErrorBody, GenerateResponse, Meta};

fn model() -> (Model<f32>, String) {
    let dir = tempfile::tempdir().unwrap();
    let scene = SceneConfig {
        height: 32,
        width: 32,
        ..SceneConfig::default()
    };
    build_dataset(12, dir.path(), 1, SplitRatios::default(), &scene).unwrap();
    let m = DatasetManifest::load(dir.path()).unwrap();
    let cfg = TrainConfig::smoke();
    let model = Model {
        config: cfg.clone(),
        encoders: Encoders::init(&cfg, build_vocab(&m).unwrap()).unwrap(),
        gan: Some(GanNets::init(&cfg).unwrap()),
        oracle: None,
    };
    let hash = model.to_checkpoint(0, 0).model_hash();
    (model, hash)
}

fn loaded() -> Arc<AppState> {
    let (m, h) = model();
    Arc::new(AppState::new(m, h).unwrap())
}

async fn call(state: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req
            .header("content-type", "application/json")
            .body(Body::from(v.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn region(b: [f64; 4], caption: &str) -> Value {
    json!({"box": b, "caption": caption})
}

#[tokio::test]
async fn health_is_ok_even_unloaded() {
    let state = Arc::new(AppState::unloaded());
    let (s, body) = call(&state, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, b"ok");
}

#[tokio::test]
async fn unloaded_server_answers_503() {
    let state = Arc::new(AppState::unloaded());
    let (s, body) = call(&state, "GET", "/meta", None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    let e: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(e.error, reason::NOT_LOADED);
    let req = json!({"regions": [region([0.1, 0.1, 0.5, 0.5], "a red circle")]});
    let (s, _) = call(&state, "POST", "/generate", Some(req)).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn meta_reports_the_checkpoint() {
    let (m, hash) = model();
    let vocab_len = m.encoders.vocab.len();
    let state = Arc::new(AppState::new(m, hash.clone()).unwrap());
    let (s, body) = call(&state, "GET", "/meta", None).await;
    assert_eq!(s, StatusCode::OK);
    let meta: Meta = serde_json::from_slice(&body).unwrap();
    assert_eq!(meta.resolution, TrainConfig::smoke().resolution);
    assert_eq!(meta.m_max, TrainConfig::smoke().m_max);
    assert_eq!(meta.vocabulary.len(), vocab_len);
    assert_eq!(meta.model_hash, hash);
    let (_, again) = call(&state, "GET", "/meta", None).await;
    assert_eq!(body, again);
}

#[tokio::test]
async fn fixed_seeds_reproduce_png_bytes() {
    let state = loaded();
    let req = json!({
        "regions": [
            {"box": [0.1, 0.1, 0.5, 0.5], "caption": "a small red circle", "region_seed": 5},
            {"box": [0.4, 0.3, 0.9, 0.8], "caption": "a large blue square", "region_seed": 6}
        ],
        "global_seed": 11
    });
    let (s1, b1) = call(&state, "POST", "/generate", Some(req.clone())).await;
    let (s2, b2) = call(&state, "POST", "/generate", Some(req)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    let r1: GenerateResponse = serde_json::from_slice(&b1).unwrap();
    let r2: GenerateResponse = serde_json::from_slice(&b2).unwrap();
    assert_eq!(r1.image, r2.image);
    assert_eq!((r1.global_seed, r1.region_seeds.clone()), (11, vec![5, 6]));
    let png = STANDARD.decode(&r1.image).unwrap();
    let img = image::load_from_memory(&png).unwrap();
    assert_eq!(img.color(), image::ColorType::Rgb8);
    assert_eq!((img.width(), img.height()), (32, 32));
    assert_eq!((r1.width, r1.height), (32, 32));
}

#[tokio::test]
async fn returned_seeds_reproduce_a_fresh_request() {
    let state = loaded();
    let req = json!({"regions": [region([0.2, 0.2, 0.7, 0.6], "a green triangle")]});
    let (_, b) = call(&state, "POST", "/generate", Some(req)).await;
    let first: GenerateResponse = serde_json::from_slice(&b).unwrap();
    let again = json!({
        "regions": [{"box": [0.2, 0.2, 0.7, 0.6], "caption": "a green triangle", "region_seed": first.region_seeds[0]}],
        "global_seed": first.global_seed
    });
    let (_, b) = call(&state, "POST", "/generate", Some(again)).await;
    let second: GenerateResponse = serde_json::from_slice(&b).unwrap();
    assert_eq!(first.image, second.image);
}

#[tokio::test]
async fn unknown_words_produce_warnings() {
    let state = loaded();
    let req = json!({"regions": [region([0.1, 0.1, 0.6, 0.6], "a tiny crimson circle")], "global_seed": 1});
    let (s, b) = call(&state, "POST", "/generate", Some(req)).await;
    assert_eq!(s, StatusCode::OK);
    let r: GenerateResponse = serde_json::from_slice(&b).unwrap();
    assert_eq!(r.unknown_tokens, vec![vec!["tiny".to_string(), "crimson".to_string()]]);
    assert_eq!(r.warnings.len(), 2);
    assert!(r.warnings[0].contains("tiny"));
}

#[tokio::test]
async fn each_violation_has_its_own_reason() {
    let state = loaded();
    let ok = region([0.1, 0.1, 0.5, 0.5], "a red circle");
    let too_many: Vec<Value> = (0..TrainConfig::smoke().m_max + 1).map(|_| ok.clone()).collect();
    let cases = vec![
        (json!({"regions": []}), reason::NO_REGIONS),
        (json!({"regions": too_many}), reason::TOO_MANY),
        (json!({"regions": [region([0.5, 0.5, 0.4, 0.9], "a red circle")]}), reason::X_ORDER),
        (json!({"regions": [region([0.1, 0.5, 0.4, 0.5], "a red circle")]}), reason::Y_ORDER),
        (json!({"regions": [region([-0.1, 0.1, 0.4, 0.5], "a red circle")]}), reason::X1_RANGE),
        (json!({"regions": [region([0.1, -0.2, 0.4, 0.5], "a red circle")]}), reason::Y1_RANGE),
        (json!({"regions": [region([0.1, 0.1, 1.4, 0.5], "a red circle")]}), reason::X2_RANGE),
        (json!({"regions": [region([0.1, 0.1, 0.4, 1.5], "a red circle")]}), reason::Y2_RANGE),
        (json!({"regions": [ok.clone(), region([0.1, 0.1, 0.4, 0.5], "   ")]}), reason::EMPTY_CAPTION),
        (json!({"regions": [{"box": [0.1, 0.2], "caption": "a red circle"}]}), reason::MALFORMED),
        (json!({"nothing": 1}), reason::MALFORMED),
    ];
    let mut seen = HashSet::new();
    for (req, want) in cases {
        let (s, b) = call(&state, "POST", "/generate", Some(req.clone())).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{req}");
        let e: ErrorBody = serde_json::from_slice(&b).unwrap();
        assert_eq!(e.error, want, "{req}");
        seen.insert(e.error);
    }
    assert_eq!(seen.len(), 10);
    let (_, b) = call(&state, "POST", "/generate", Some(json!({"regions": [ok, region([0.5, 0.5, 0.4, 0.9], "x")]}))).await;
    let e: ErrorBody = serde_json::from_slice(&b).unwrap();
    assert_eq!(e.region, Some(1));
}
