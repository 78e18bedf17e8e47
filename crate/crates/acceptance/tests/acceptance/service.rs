//! The HTTP contract on the reference bundle.

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;
use voxsnap_acceptance::{ensure, Outcome};
use voxsnap_core::bundle::ModelBundle;
use voxsnap_core::voxel::{to_base64, VoxelGrid};
use voxsnap_service::config::ServiceConfig;
use voxsnap_service::{router, AppState, REQUEST_ID_HEADER};

struct Reply {
    status: StatusCode,
    request_id: String,
    bytes: Vec<u8>,
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<String>) -> Reply {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let request_id = resp
        .headers()
        .get(REQUEST_ID_HEADER.as_str())
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default()
        .to_string();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec();
    Reply { status, request_id, bytes }
}

async fn post(app: &Router, uri: &str, body: Value) -> Reply {
    call(app, "POST", uri, Some(body.to_string())).await
}

fn app(bundle: &ModelBundle, cfg: ServiceConfig) -> Result<Router, String> {
    let state = AppState::new(vec![bundle.clone()], &cfg).map_err(|e| e.to_string())?;
    Ok(router(state, &cfg))
}

fn expect_error(case: &str, r: &Reply, status: StatusCode, code: &str) -> Result<(), String> {
    let body: Value = serde_json::from_slice(&r.bytes).map_err(|e| format!("{case}: body is not JSON: {e}"))?;
    ensure(r.status == status && body["code"] == code, || {
        format!("{case}: got {} {}, want {status} {code}", r.status, body["code"])
    })?;
    ensure(body["message"].as_str().is_some_and(|m| !m.is_empty()), || format!("{case}: empty message"))?;
    ensure(!r.request_id.is_empty() && body["request_id"] == r.request_id.as_str(), || {
        format!("{case}: request id missing or not echoed")
    })
}

async fn contract(bundle: &ModelBundle, input: &VoxelGrid) -> Outcome {
    let a = app(bundle, ServiceConfig::default())?;
    let category = bundle.category.name();
    let grid = to_base64(input);
    let body = json!({"category": category, "grid": grid});
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let (a, body) = (a.clone(), body.clone());
            tokio::spawn(async move { post(&a, "/api/snap", body).await })
        })
        .collect();
    let mut replies = Vec::new();
    for h in handles {
        replies.push(h.await.map_err(|e| e.to_string())?);
    }
    ensure(replies.iter().all(|r| r.status == StatusCode::OK), || "a parallel snap did not return 200".into())?;
    ensure(replies.windows(2).all(|w| w[0].bytes == w[1].bytes), || "parallel snap bodies differ".into())?;
    let sequential = post(&a, "/api/snap", body).await;
    ensure(sequential.bytes == replies[0].bytes, || "sequential snap differs from parallel".into())?;

    let small = to_base64(&VoxelGrid::empty(bundle.models.resolution() / 2));
    let cases: Vec<(&str, Reply, StatusCode, &str)> = vec![
        (
            "unknown category",
            post(&a, "/api/snap", json!({"category": "boat", "grid": grid})).await,
            StatusCode::NOT_FOUND,
            "model_not_found",
        ),
        (
            "category not loaded",
            post(&a, "/api/snap", json!({"category": "airplane", "grid": grid})).await,
            StatusCode::NOT_FOUND,
            "model_not_found",
        ),
        (
            "bad base64",
            post(&a, "/api/snap", json!({"category": category, "grid": "not base64!"})).await,
            StatusCode::BAD_REQUEST,
            "bad_request",
        ),
        (
            "bad VXGB payload",
            post(&a, "/api/snap", json!({"category": category, "grid": "QUJDRA=="})).await,
            StatusCode::BAD_REQUEST,
            "bad_request",
        ),
        (
            "resolution mismatch",
            post(&a, "/api/snap", json!({"category": category, "grid": small})).await,
            StatusCode::CONFLICT,
            "resolution_mismatch",
        ),
        (
            "invalid override",
            post(&a, "/api/snap", json!({"category": category, "grid": grid, "overrides": {"threshold": 2.0}})).await,
            StatusCode::BAD_REQUEST,
            "bad_request",
        ),
        (
            "malformed JSON",
            call(&a, "POST", "/api/snap", Some("{not json".into())).await,
            StatusCode::BAD_REQUEST,
            "bad_request",
        ),
        (
            "generate n = 65",
            post(&a, "/api/generate", json!({"category": category, "n": 65})).await,
            StatusCode::BAD_REQUEST,
            "bad_request",
        ),
        (
            "generate unknown category",
            post(&a, "/api/generate", json!({"category": "boat"})).await,
            StatusCode::NOT_FOUND,
            "model_not_found",
        ),
        (
            "interpolate steps = 17",
            post(&a, "/api/interpolate", json!({"category": category, "z_a": [0.0], "z_b": [0.0], "steps": 17})).await,
            StatusCode::BAD_REQUEST,
            "bad_request",
        ),
        (
            "interpolate latent dim",
            post(&a, "/api/interpolate", json!({"category": category, "z_a": [0.0], "z_b": [0.0], "steps": 3})).await,
            StatusCode::BAD_REQUEST,
            "bad_request",
        ),
        ("wrong method", call(&a, "GET", "/api/snap", None).await, StatusCode::METHOD_NOT_ALLOWED, "bad_request"),
        ("unknown route", call(&a, "GET", "/api/nothing", None).await, StatusCode::NOT_FOUND, "bad_request"),
    ];
    let mut n = cases.len();
    for (case, r, status, code) in &cases {
        expect_error(case, r, *status, code)?;
    }
    let limited = app(bundle, ServiceConfig { body_limit: 1024, ..ServiceConfig::default() })?;
    let dense = json!({"category": category, "grid": input.to_dense()});
    expect_error("oversized body", &post(&limited, "/api/snap", dense).await, StatusCode::PAYLOAD_TOO_LARGE, "bad_request")?;
    let hurried = app(bundle, ServiceConfig { timeout_secs: 1e-9, ..ServiceConfig::default() })?;
    let r = post(&hurried, "/api/snap", json!({"category": category, "grid": grid})).await;
    expect_error("timeout", &r, StatusCode::INTERNAL_SERVER_ERROR, "internal")?;
    n += 2;
    Ok(format!("8 parallel snaps byte-identical and equal to a sequential one; {n} error paths return their documented codes"))
}

pub fn criterion(bundle: &ModelBundle, input: &VoxelGrid) -> Outcome {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    rt.block_on(contract(bundle, input))
}
