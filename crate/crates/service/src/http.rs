//! Read-only HTTP JSON API over the pipeline's published snapshot.
//!
//! Routes (all GET, all versioned):
//! * `/v1/health` - service status and tick count
//! * `/v1/flows/latest` - latest observed flow tensor
//! * `/v1/forecast?steps=k` - forecast records up to the configured horizon
//! * `/v1/region/{i}/{j}?window=w` - one cell's recent history plus forecast
//!
//! Data endpoints return 503 until the first successful tick; out-of-range
//! cell indices or steps beyond the horizon return 400. Handlers only read
//! the snapshot, so concurrent requests never contend with the tick writer
//! beyond the pointer swap.

use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Json, Response};
use axum::routing::get;
use axum::Router;
use serde_json::{json, Value};

use cityflow_core::grid::{FlowTensor, INFLOW, OUTFLOW};

use crate::pipeline::{SharedSnapshot, Snapshot};

pub const API_VERSION: u32 = 1;

#[derive(Clone)]
pub struct AppState {
    pub snapshot: SharedSnapshot,
}

impl AppState {
    pub fn new(snapshot: SharedSnapshot) -> AppState {
        AppState { snapshot }
    }

    fn read(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/flows/latest", get(latest))
        .route("/v1/forecast", get(forecast))
        .route("/v1/region/{i}/{j}", get(region))
        .with_state(state)
}

/// Binds and serves until the process exits.
pub async fn serve(addr: std::net::SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

fn plane(tensor: &FlowTensor, channel: usize) -> Vec<Vec<f64>> {
    (0..tensor.rows())
        .map(|i| (0..tensor.cols()).map(|j| tensor.get(channel, i, j)).collect())
        .collect()
}

fn bad_request(message: &str) -> Response {
    (
        StatusCode::BAD_REQUEST,
        Json(json!({"version": API_VERSION, "error": message})),
    )
        .into_response()
}

fn warming_up() -> Response {
    (
        StatusCode::SERVICE_UNAVAILABLE,
        Json(json!({"version": API_VERSION, "error": "no successful tick yet"})),
    )
        .into_response()
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    let snap = state.read();
    Json(json!({
        "version": API_VERSION,
        "status": if snap.ticks > 0 { "ok" } else { "warming" },
        "ticks": snap.ticks,
        "latest_interval": snap.latest.as_ref().map(|(t, _)| *t),
        "checkpoint": snap.checkpoint_id,
    }))
}

async fn latest(State(state): State<AppState>) -> Response {
    let snap = state.read();
    match &snap.latest {
        None => warming_up(),
        Some((t, tensor)) => Json(json!({
            "version": API_VERSION,
            "t": t,
            "inflow": plane(tensor, INFLOW),
            "outflow": plane(tensor, OUTFLOW),
        }))
        .into_response(),
    }
}

async fn forecast(
    State(state): State<AppState>,
    Query(params): Query<HashMap<String, String>>,
) -> Response {
    let snap = state.read();
    if snap.ticks == 0 {
        return warming_up();
    }
    let steps = match params.get("steps") {
        None => snap.horizon,
        Some(raw) => match raw.parse::<usize>() {
            Ok(k) if (1..=snap.horizon).contains(&k) => k,
            Ok(_) => return bad_request("steps outside the configured horizon"),
            Err(_) => return bad_request("steps must be a positive integer"),
        },
    };
    let records: Vec<Value> = snap
        .forecasts
        .iter()
        .take(steps)
        .map(|r| {
            let export = r.export_tensor();
            json!({
                "t": r.interval,
                "produced_at": r.produced_at,
                "checkpoint": r.checkpoint_id,
                "inflow": plane(&export, INFLOW),
                "outflow": plane(&export, OUTFLOW),
            })
        })
        .collect();
    Json(json!({
        "version": API_VERSION,
        "horizon": snap.horizon,
        "records": records,
    }))
    .into_response()
}

async fn region(
    State(state): State<AppState>,
    Path((i, j)): Path<(usize, usize)>,
    Query(params): Query<HashMap<String, String>>,
) -> Response {
    let snap = state.read();
    if snap.ticks == 0 {
        return warming_up();
    }
    let (rows, cols) = match &snap.latest {
        Some((_, tensor)) => (tensor.rows(), tensor.cols()),
        None => return warming_up(),
    };
    if i >= rows || j >= cols {
        return bad_request("cell index outside the grid");
    }
    let window = match params.get("window") {
        None => snap.window.len(),
        Some(raw) => match raw.parse::<usize>() {
            Ok(w) if w >= 1 => w,
            _ => return bad_request("window must be a positive integer"),
        },
    };
    let start = snap.window.len().saturating_sub(window);
    let history: Vec<Value> = snap.window[start..]
        .iter()
        .map(|(t, tensor)| {
            json!({
                "t": t,
                "inflow": tensor.get(INFLOW, i, j),
                "outflow": tensor.get(OUTFLOW, i, j),
            })
        })
        .collect();
    let forecast: Vec<Value> = snap
        .forecasts
        .iter()
        .map(|r| {
            let export = r.export_tensor();
            json!({
                "t": r.interval,
                "inflow": export.get(INFLOW, i, j),
                "outflow": export.get(OUTFLOW, i, j),
            })
        })
        .collect();
    Json(json!({
        "version": API_VERSION,
        "i": i,
        "j": j,
        "history": history,
        "forecast": forecast,
    }))
    .into_response()
}
