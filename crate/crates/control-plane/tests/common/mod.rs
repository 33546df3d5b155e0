#![allow(dead_code)]

use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use netpg_control::{ControlPlane, ServiceConfig};
use netpg_core::inventory::parse_inventory;
use netpg_core::sim::{SimConfig, SimHandle};
use serde_json::Value;
use tower::ServiceExt;

pub fn plane(sim: SimConfig, svc: ServiceConfig) -> ControlPlane {
    let h = SimHandle::from_config(sim).unwrap();
    let inv = parse_inventory(&h.lock().inventory_text()).unwrap();
    ControlPlane::new(h, inv, svc)
}

pub fn fast() -> ServiceConfig {
    ServiceConfig {
        speed: 100.0,
        ..ServiceConfig::default()
    }
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, v)
}

/// Poll `f` every 20 ms of wall time until it returns `Some`.
pub async fn eventually<T>(limit: Duration, mut f: impl AsyncFnMut() -> Option<T>) -> T {
    let end = Instant::now() + limit;
    loop {
        if let Some(v) = f().await {
            return v;
        }
        assert!(Instant::now() < end, "condition not reached within {limit:?}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}
