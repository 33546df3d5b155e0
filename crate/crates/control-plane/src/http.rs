//! HTTP routes and the `/stream` line feed.
//!
//! | route | |
//! |---|---|
//! | `GET /nodes[?group=G]` | node statuses |
//! | `GET /nodes/{id}` | one node |
//! | `POST /power` | start a staggered switch, 202 with the plan id |
//! | `GET /power/{id}` | plan progress |
//! | `POST /playbooks/run` | run a playbook to completion |
//! | `POST /collect` | collect telemetry from a group |
//! | `POST /experiments` | start an experiment run, 202 with the run id |
//! | `GET /experiments/{id}` | run record |
//! | `GET /stream` | one JSON object per line: `{kind, node_id, timestamp_us, payload}` |
//!
//! Errors are `{"error": "..."}` with a 4xx/5xx status.

use std::collections::{HashMap, VecDeque};
use std::convert::Infallible;
use std::future::Future;

use axum::body::{Body, Bytes};
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use netpg_core::collector::{energy_report, EnergyReport, SeriesMap};
use netpg_core::orchestrator::RunResult;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, watch};

use crate::model::{
    ApiError, CollectRequest, EventKind, ExperimentSpec, PlaybookRequest, PowerRequest, StreamEvent,
};
use crate::service::ControlPlane;

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ApiError::BadRequest(e.body_text()))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

#[derive(Debug, Deserialize)]
struct NodesQuery {
    group: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlaybookResponse {
    pub succeeded: bool,
    #[serde(flatten)]
    pub run: RunResult,
}

impl From<RunResult> for PlaybookResponse {
    fn from(run: RunResult) -> Self {
        Self {
            succeeded: run.succeeded(),
            run,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CollectResponse {
    pub report: EnergyReport,
    pub series: SeriesMap,
}

impl From<SeriesMap> for CollectResponse {
    fn from(series: SeriesMap) -> Self {
        Self {
            report: energy_report(&series),
            series,
        }
    }
}

pub fn router(cp: ControlPlane) -> Router {
    Router::new()
        .route("/nodes", get(list_nodes))
        .route("/nodes/{id}", get(get_node))
        .route("/power", post(power))
        .route("/power/{id}", get(get_plan))
        .route("/playbooks/run", post(run_playbook))
        .route("/collect", post(collect))
        .route("/experiments", post(start_experiment))
        .route("/experiments/{id}", get(get_experiment))
        .route("/stream", get(stream))
        .with_state(cp)
}

async fn list_nodes(State(cp): State<ControlPlane>, Query(q): Query<NodesQuery>) -> Response {
    match cp.nodes(q.group.as_deref()) {
        Ok(v) => Json(v).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn get_node(State(cp): State<ControlPlane>, Path(id): Path<u16>) -> Response {
    match cp.node(id) {
        Ok(v) => Json(v).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn power(State(cp): State<ControlPlane>, req: Result<Json<PowerRequest>, JsonRejection>) -> Response {
    match body(req).and_then(|r| cp.power(&r)) {
        Ok(ticket) => (StatusCode::ACCEPTED, Json(ticket)).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn get_plan(State(cp): State<ControlPlane>, Path(id): Path<u64>) -> Response {
    match cp.plan(id) {
        Ok(v) => Json(v).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn run_playbook(
    State(cp): State<ControlPlane>,
    req: Result<Json<PlaybookRequest>, JsonRejection>,
) -> Response {
    let req = match body(req) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    match blocking(move || cp.run_playbook(&req)).await {
        Ok(run) => Json(PlaybookResponse::from(run)).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn collect(State(cp): State<ControlPlane>, req: Result<Json<CollectRequest>, JsonRejection>) -> Response {
    let req = match body(req) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    match blocking(move || cp.collect(&req)).await {
        Ok(series) => Json(CollectResponse::from(series)).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn start_experiment(
    State(cp): State<ControlPlane>,
    req: Result<Json<ExperimentSpec>, JsonRejection>,
) -> Response {
    match body(req).and_then(|spec| cp.start_experiment(spec)) {
        Ok(run_id) => (StatusCode::ACCEPTED, Json(serde_json::json!({ "run_id": run_id }))).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn get_experiment(State(cp): State<ControlPlane>, Path(id): Path<u64>) -> Response {
    match cp.experiment(id) {
        Ok(v) => Json(v).into_response(),
        Err(e) => e.into_response(),
    }
}

/// Per-subscriber feed: a full status snapshot, then live events. Node
/// events older than one already sent for that node are dropped.
struct Feed {
    pending: VecDeque<StreamEvent>,
    rx: broadcast::Receiver<StreamEvent>,
    closed: watch::Receiver<bool>,
    last: HashMap<u16, u64>,
}

impl Feed {
    async fn next_line(&mut self) -> Option<String> {
        loop {
            let ev = match self.pending.pop_front() {
                Some(ev) => ev,
                None => match tokio::select! {
                    r = self.rx.recv() => r,
                    _ = self.closed.wait_for(|c| *c) => return None,
                } {
                    Ok(ev) => ev,
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        tracing::warn!(skipped = n, "stream subscriber lagging");
                        continue;
                    }
                    Err(broadcast::error::RecvError::Closed) => return None,
                },
            };
            if let Some(node) = ev.node_id {
                let last = self.last.entry(node).or_insert(0);
                if ev.timestamp_us < *last {
                    continue;
                }
                *last = ev.timestamp_us;
            }
            return Some(ev.to_line());
        }
    }
}

async fn stream(State(cp): State<ControlPlane>) -> Response {
    let rx = cp.subscribe();
    let pending = match cp.nodes(None) {
        Ok(nodes) => nodes
            .into_iter()
            .map(|st| StreamEvent {
                kind: EventKind::NodeStatus,
                node_id: Some(st.node_id),
                timestamp_us: st.timestamp_us,
                payload: serde_json::to_value(&st).expect("status serializes"),
            })
            .collect(),
        Err(e) => return e.into_response(),
    };
    let feed = Feed {
        pending,
        rx,
        closed: cp.streams_closed(),
        last: HashMap::new(),
    };
    let lines = futures::stream::unfold(feed, |mut feed| async move {
        let line = feed.next_line().await?;
        Some((Ok::<_, Infallible>(Bytes::from(line)), feed))
    });
    (
        [(header::CONTENT_TYPE, "application/x-ndjson")],
        Body::from_stream(lines),
    )
        .into_response()
}

/// Serve until `shutdown` resolves, then shut the control plane down.
pub async fn serve(
    cp: ControlPlane,
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let pacer = cp.start_pacer();
    let app = router(cp.clone());
    let closer = cp.clone();
    let shutdown = async move {
        shutdown.await;
        closer.close_streams();
    };
    tracing::info!(addr = ?listener.local_addr().ok(), "control plane listening");
    let served = axum::serve(listener, app).with_graceful_shutdown(shutdown).await;
    tokio::task::spawn_blocking(move || cp.shutdown(Some(pacer)))
        .await
        .map_err(std::io::Error::other)?;
    served
}
