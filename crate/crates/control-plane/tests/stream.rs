mod common;

use std::collections::HashMap;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::Request;
use common::plane;
use http_body_util::BodyExt;
use netpg_control::http::{router, serve};
use netpg_control::model::{ExperimentSpec, Phase, PhaseStatus, PowerRequest, StreamEvent};
use netpg_control::ServiceConfig;
use netpg_core::power::RelayState;
use netpg_core::sim::SimConfig;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tower::ServiceExt;

fn speed(s: f64) -> ServiceConfig {
    ServiceConfig {
        speed: s,
        ..ServiceConfig::default()
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn rack_power_on_streams_in_timestamp_order() {
    let cp = plane(SimConfig::default(), speed(20.0));
    let pacer = cp.start_pacer();
    let resp = router(cp.clone())
        .oneshot(Request::get("/stream").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.headers()["content-type"], "application/x-ndjson");
    let mut body = resp.into_body();
    cp.power(&PowerRequest {
        rack: Some(0),
        state: Some(RelayState::On),
        ..PowerRequest::default()
    })
    .unwrap();

    let mut buf = Vec::new();
    let mut events: Vec<StreamEvent> = Vec::new();
    let deadline = Instant::now() + Duration::from_secs(20);
    let all_on = |evs: &[StreamEvent]| {
        (1..=16u16).all(|n| {
            evs.iter()
                .any(|e| e.node_id == Some(n) && e.payload.get("power").is_some_and(|p| p == "on"))
        })
    };
    while !all_on(&events) {
        let left = deadline.saturating_duration_since(Instant::now());
        let frame = tokio::time::timeout(left, body.frame()).await.expect("rack 0 on within 20 s");
        let data = frame.unwrap().unwrap().into_data().unwrap();
        buf.extend_from_slice(&data);
        while let Some(pos) = buf.iter().position(|b| *b == b'\n') {
            let line: Vec<u8> = buf.drain(..=pos).collect();
            let v: serde_json::Value = serde_json::from_slice(&line).unwrap();
            for key in ["kind", "node_id", "timestamp_us", "payload"] {
                assert!(v.get(key).is_some(), "{v}");
            }
            events.push(serde_json::from_value(v).unwrap());
        }
    }
    cp.shutdown(Some(pacer));

    // the snapshot comes first, one status per node
    assert!(events.len() > 136);
    assert!(events[..136].iter().all(|e| e.payload["power"].is_string()));
    let mut last: HashMap<u16, u64> = HashMap::new();
    for e in events.iter().filter(|e| e.node_id.is_some()) {
        let n = e.node_id.unwrap();
        let prev = last.insert(n, e.timestamp_us).unwrap_or(0);
        assert!(e.timestamp_us >= prev, "node {n}: {} after {prev}", e.timestamp_us);
    }
    let node1: Vec<&str> = events
        .iter()
        .filter(|e| e.node_id == Some(1) && e.payload["power"].is_string())
        .map(|e| e.payload["power"].as_str().unwrap())
        .collect();
    assert_eq!(node1.first(), Some(&"off"));
    assert_eq!(node1.last(), Some(&"on"));
    assert!(events
        .iter()
        .any(|e| e.node_id == Some(1) && e.payload.get("current_ua").is_some_and(|c| c == 1_200_000)));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn shutdown_finishes_reset_and_closes_streams() {
    let cp = plane(SimConfig::default(), speed(10.0));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve(cp.clone(), listener, async {
        let _ = stopped.await;
    }));

    let mut sub = tokio::net::TcpStream::connect(addr).await.unwrap();
    sub.write_all(b"GET /stream HTTP/1.1\r\nHost: x\r\n\r\n").await.unwrap();

    let run_id = cp
        .start_experiment(ExperimentSpec {
            group: "odroids-testgroup".into(),
            delay_ms: 20,
            rate_kbit: Some(10_000),
            workload_playbook: None,
            extra_vars: Default::default(),
            duration_s: 600.0,
        })
        .unwrap();
    let t0 = Instant::now();
    while cp.experiment(run_id).unwrap().phase(Phase::Collect).status != PhaseStatus::Running {
        assert!(t0.elapsed() < Duration::from_secs(20));
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    stop.send(()).unwrap();
    tokio::time::timeout(Duration::from_secs(30), server)
        .await
        .expect("server stops")
        .unwrap()
        .unwrap();

    let run = cp.experiment(run_id).unwrap();
    assert!(run.finished);
    assert_eq!(run.phase(Phase::Reset).status, PhaseStatus::Ok, "{run:?}");
    for n in cp.nodes(Some("odroids-testgroup")).unwrap() {
        assert_eq!(n.link.delay_ms, 0);
    }
    // the subscriber was hung up on
    let mut rest = Vec::new();
    tokio::time::timeout(Duration::from_secs(5), sub.read_to_end(&mut rest))
        .await
        .expect("stream closed")
        .unwrap();
    assert!(String::from_utf8_lossy(&rest).contains("node_status"));
    assert!(cp.start_experiment(run.spec.clone()).is_err());
}
