//! Trainer HTTP API: the step counter, training metrics and the rollout
//! upload bucket.

use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::routing::{get, put};
use axum::{Json, Router};
use serde::Deserialize;
use swarm_core::trainer::TrainMetrics;

use super::api::{parse_address, MetricsDto, StepDto};
use super::{authenticate, bad_request, unauthorized, ApiError};
use crate::bucket::{Bucket, ObjectKey};
use crate::error::{Error, Result};

#[derive(Debug)]
pub struct TrainerStatus {
    pub step: u64,
    pub version: u64,
    pub scanning: u64,
    pub done: bool,
    pub metrics: Vec<TrainMetrics>,
}

pub struct TrainerState {
    pub status: Mutex<TrainerStatus>,
    pub bucket: Bucket,
}

pub type SharedTrainer = Arc<TrainerState>;

pub const MAX_UPLOAD: usize = 16 * 1024 * 1024;

pub fn router(state: SharedTrainer) -> Router {
    Router::new()
        .route("/step", get(step))
        .route("/metrics", get(metrics))
        .route("/rollouts/{step}/{name}", put(upload))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(state)
}

async fn step(State(s): State<SharedTrainer>) -> Json<StepDto> {
    let st = s.status.lock().unwrap();
    Json(StepDto { step: st.step, version: st.version, scanning: st.scanning, done: st.done })
}

#[derive(Debug, Deserialize)]
struct Since {
    since: Option<usize>,
}

/// Metrics rows from index `since` on, in the order they were produced.
async fn metrics(State(s): State<SharedTrainer>, Query(q): Query<Since>) -> Json<Vec<MetricsDto>> {
    let st = s.status.lock().unwrap();
    Json(st.metrics.iter().skip(q.since.unwrap_or(0)).map(MetricsDto::from).collect())
}

/// `PUT /rollouts/{step}/{node}-{submission}.txt`, signed by `node`.
async fn upload(
    State(s): State<SharedTrainer>,
    headers: HeaderMap,
    Path((step, name)): Path<(u64, String)>,
    body: Bytes,
) -> Result<StatusCode, ApiError> {
    let who = authenticate(&headers, "PUT", &format!("/rollouts/{step}/{name}"), &body).ok_or_else(unauthorized)?;
    let (node, sub) = name
        .strip_suffix(".txt")
        .and_then(|n| n.rsplit_once('-'))
        .ok_or_else(|| bad_request("object name must be <node>-<submission>.txt"))?;
    let node = parse_address(node).map_err(|e| bad_request(e.to_string()))?;
    let submission = sub.parse().map_err(|_| bad_request("bad submission index"))?;
    if node != who {
        return Err(unauthorized());
    }
    let key = ObjectKey { step, node, submission };
    if s.bucket.state(&key) != crate::bucket::ObjectState::Missing {
        return Err((StatusCode::CONFLICT, "object exists".into()));
    }
    s.bucket.put(&key, &body).map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(StatusCode::CREATED)
}

pub async fn serve_trainer(listener: tokio::net::TcpListener, state: SharedTrainer) -> Result<()> {
    axum::serve(listener, router(state)).await.map_err(Error::RawIo)
}
