//! Orchestrator HTTP API: discovery, invites, heartbeats, task scheduling,
//! verdicts, the ledger and a server-push event stream.

use std::collections::{BTreeMap, BTreeSet};
use std::convert::Infallible;
use std::sync::{mpsc, Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::Deserialize;
use swarm_core::crypto::{Address, Keypair};
use swarm_core::orchestrator::{Invite, NodeState, NodeStatus, Orchestrator, OrchestratorConfig};
use tokio::sync::broadcast;

use super::api::*;
use super::{authenticate, bad_request, unauthorized, ApiError};
use crate::error::{Error, Result};
use crate::format;

pub struct OrchState {
    pub orch: Orchestrator,
    pub roles: BTreeMap<Address, Role>,
    /// Invites issued by the last sweeps, awaiting pickup.
    pub invites: BTreeMap<Address, Invite>,
    started: Instant,
    /// Events already forwarded to stream subscribers.
    forwarded: usize,
    events: broadcast::Sender<EventDto>,
    allowlist: BTreeSet<Address>,
    allowlist_epoch: u64,
    allowlist_tx: Option<mpsc::Sender<(u64, BTreeSet<Address>)>>,
}

pub type SharedOrch = Arc<Mutex<OrchState>>;

impl OrchState {
    pub fn new(owner: Keypair, cfg: OrchestratorConfig) -> Self {
        Self {
            orch: Orchestrator::new(owner, cfg),
            roles: BTreeMap::new(),
            invites: BTreeMap::new(),
            started: Instant::now(),
            forwarded: 0,
            events: broadcast::channel(4096).0,
            allowlist: BTreeSet::new(),
            allowlist_epoch: 0,
            allowlist_tx: None,
        }
    }

    pub fn now_ms(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }

    /// Forwards new events to subscribers and pushes a changed allowlist.
    fn flush(&mut self) {
        let all = self.orch.events();
        for (i, e) in all.iter().enumerate().skip(self.forwarded) {
            let _ = self.events.send(EventDto::new(i as u64, e));
        }
        self.forwarded = all.len();
        let now = self.orch.allowlist();
        if now != self.allowlist {
            self.allowlist = now.clone();
            self.allowlist_epoch += 1;
            if let Some(tx) = &self.allowlist_tx {
                let _ = tx.send((self.allowlist_epoch, now));
            }
        }
    }

    pub fn sweep(&mut self) {
        let now = self.now_ms();
        let out = self.orch.sweep(now);
        for inv in out.invites {
            self.invites.insert(inv.node, inv);
        }
        self.flush();
    }
}

pub fn router(state: SharedOrch) -> Router {
    Router::new()
        .route("/register", post(register))
        .route("/invite", get(invite))
        .route("/invite/accept", post(accept))
        .route("/heartbeat", post(heartbeat))
        .route("/nodes", get(nodes))
        .route("/nodes/{id}/logs", get(logs).post(push_logs))
        .route("/nodes/{id}/restart", post(restart))
        .route("/tasks", get(tasks).post(create_task))
        .route("/verdicts", post(verdict))
        .route("/ledger", get(ledger))
        .route("/events", get(events))
        .with_state(state)
}

fn signer(headers: &HeaderMap, method: &str, path: &str, body: &[u8]) -> Result<Address, ApiError> {
    authenticate(headers, method, path, body).ok_or_else(unauthorized)
}

fn json<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| bad_request(format!("bad JSON: {e}")))
}

fn conflict(e: impl ToString) -> ApiError {
    (StatusCode::CONFLICT, e.to_string())
}

fn node_id(id: &str) -> Result<Address, ApiError> {
    parse_address(id).map_err(|e| bad_request(e.to_string()))
}

async fn register(State(s): State<SharedOrch>, headers: HeaderMap, body: Bytes) -> Result<StatusCode, ApiError> {
    let who = signer(&headers, "POST", "/register", &body)?;
    let req: RegisterRequest = json(&body)?;
    let mut s = s.lock().unwrap();
    let now = s.now_ms();
    s.orch.register(who, &req.endpoint, &req.hardware, now).map_err(conflict)?;
    s.roles.insert(who, req.role);
    s.invites.remove(&who);
    s.flush();
    Ok(StatusCode::CREATED)
}

async fn invite(State(s): State<SharedOrch>, headers: HeaderMap) -> Result<Json<InviteDto>, ApiError> {
    let who = signer(&headers, "GET", "/invite", &[])?;
    let s = s.lock().unwrap();
    s.invites.get(&who).map(|i| Json(InviteDto::from(i))).ok_or((StatusCode::NOT_FOUND, "no invite yet".into()))
}

async fn accept(State(s): State<SharedOrch>, headers: HeaderMap, body: Bytes) -> Result<StatusCode, ApiError> {
    let who = signer(&headers, "POST", "/invite/accept", &body)?;
    let inv = json::<InviteDto>(&body)?.to_invite().map_err(|e| bad_request(e.to_string()))?;
    if inv.node != who {
        return Err(unauthorized());
    }
    let mut s = s.lock().unwrap();
    let now = s.now_ms();
    s.orch.accept_invite(&inv, now).map_err(conflict)?;
    s.invites.remove(&who);
    s.flush();
    Ok(StatusCode::OK)
}

async fn heartbeat(State(s): State<SharedOrch>, headers: HeaderMap, body: Bytes) -> Result<Json<HeartbeatResponse>, ApiError> {
    let who = signer(&headers, "POST", "/heartbeat", &body)?;
    let req: HeartbeatRequest = json(&body)?;
    let mut s = s.lock().unwrap();
    let now = s.now_ms();
    let reply = s.orch.heartbeat(&who, &NodeStatus { busy: req.busy, finished: req.finished }, now).map_err(conflict)?;
    s.flush();
    Ok(Json(HeartbeatResponse { task: reply.task.as_ref().map(TaskDto::from), restart: reply.restart }))
}

async fn nodes(State(s): State<SharedOrch>) -> Json<Vec<NodeDto>> {
    let s = s.lock().unwrap();
    Json(s.orch.nodes().map(|n| NodeDto::new(n, s.roles.get(&n.address).cloned())).collect())
}

async fn logs(State(s): State<SharedOrch>, Path(id): Path<String>) -> Result<Json<Vec<String>>, ApiError> {
    let a = node_id(&id)?;
    let s = s.lock().unwrap();
    s.orch.node(&a).ok_or((StatusCode::NOT_FOUND, "unknown node".into()))?;
    Ok(Json(s.orch.logs(&a)))
}

async fn push_logs(State(s): State<SharedOrch>, headers: HeaderMap, Path(id): Path<String>, body: Bytes) -> Result<StatusCode, ApiError> {
    let a = node_id(&id)?;
    if signer(&headers, "POST", &format!("/nodes/{id}/logs"), &body)? != a {
        return Err(unauthorized());
    }
    let lines: Vec<String> = json(&body)?;
    let mut s = s.lock().unwrap();
    for l in &lines {
        s.orch.push_log(&a, l);
    }
    Ok(StatusCode::OK)
}

async fn restart(State(s): State<SharedOrch>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    let a = node_id(&id)?;
    let mut s = s.lock().unwrap();
    if s.orch.node(&a).is_none() {
        return Err((StatusCode::NOT_FOUND, "unknown node".into()));
    }
    s.orch.restart(&a).map_err(conflict)?;
    s.flush();
    Ok(StatusCode::ACCEPTED)
}

async fn tasks(State(s): State<SharedOrch>) -> Json<Vec<TaskDto>> {
    Json(s.lock().unwrap().orch.tasks().map(TaskDto::from).collect())
}

async fn create_task(State(s): State<SharedOrch>, Json(req): Json<CreateTask>) -> Result<(StatusCode, Json<CreatedTask>), ApiError> {
    let kind = parse_task_kind(&req.kind).map_err(|e| bad_request(e.to_string()))?;
    let target = req.target.as_deref().map(node_id).transpose()?;
    let mut s = s.lock().unwrap();
    let id = s.orch.create_task(kind, &req.config, target);
    s.flush();
    Ok((StatusCode::CREATED, Json(CreatedTask { id })))
}

async fn verdict(State(s): State<SharedOrch>, headers: HeaderMap, body: Bytes) -> Result<StatusCode, ApiError> {
    let who = signer(&headers, "POST", "/verdicts", &body)?;
    let (author, v) = json::<VerdictDto>(&body)?.to_verdict().map_err(|e| bad_request(e.to_string()))?;
    let mut s = s.lock().unwrap();
    let is_validator = s.roles.get(&who) == Some(&Role::Validator) && s.orch.node(&who).is_some_and(|n| n.state == NodeState::Active);
    if !is_validator {
        return Err((StatusCode::FORBIDDEN, "verdicts are accepted from active validators only".into()));
    }
    s.orch.record_verdict(&author, v).map_err(conflict)?;
    s.flush();
    Ok(StatusCode::OK)
}

async fn ledger(State(s): State<SharedOrch>) -> String {
    let s = s.lock().unwrap();
    s.orch.ledger().events().iter().map(format::ledger_line).collect()
}

#[derive(Debug, Deserialize)]
struct Since {
    since: Option<u64>,
}

/// Replays events from `since` (default: all), then follows live ones.
async fn events(State(s): State<SharedOrch>, Query(q): Query<Since>) -> Sse<impl Stream<Item = Result<SseEvent, Infallible>>> {
    let (past, rx) = {
        let s = s.lock().unwrap();
        let from = q.since.unwrap_or(0) as usize;
        let past: Vec<EventDto> =
            s.orch.events().iter().enumerate().skip(from).take(s.forwarded.saturating_sub(from)).map(|(i, e)| EventDto::new(i as u64, e)).collect();
        (past, s.events.subscribe())
    };
    let next = past.last().map(|e| e.seq() + 1).unwrap_or(q.since.unwrap_or(0));
    let live = stream::unfold((rx, next), |(mut rx, next)| async move {
        loop {
            match rx.recv().await {
                Ok(e) if e.seq() >= next => {
                    let n = e.seq() + 1;
                    return Some((e, (rx, n)));
                }
                Ok(_) | Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    let all = stream::iter(past).chain(live).map(|e| Ok(SseEvent::default().json_data(&e).unwrap_or_default()));
    Sse::new(all).keep_alive(KeepAlive::default())
}

/// Serves the orchestrator: runs a sweep every heartbeat interval and
/// pushes allowlist changes to `relays`.
pub async fn serve_orchestrator(listener: tokio::net::TcpListener, state: SharedOrch, owner: Keypair, relays: Vec<String>) -> Result<()> {
    let (tx, rx) = mpsc::channel::<(u64, BTreeSet<Address>)>();
    std::thread::spawn(move || {
        while let Ok((mut epoch, mut set)) = rx.recv() {
            while let Ok(newer) = rx.try_recv() {
                (epoch, set) = newer;
            }
            if let Err(e) = super::relay::push_allowlist(&relays, &owner, set.iter().copied(), epoch) {
                tracing::warn!("allowlist push failed: {e}");
            }
        }
    });
    let interval = {
        let mut s = state.lock().unwrap();
        s.allowlist_tx = Some(tx);
        s.orch.cfg.heartbeat_interval_ms
    };
    let sweeper = state.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_millis(interval));
        tick.tick().await;
        loop {
            tick.tick().await;
            sweeper.lock().unwrap().sweep();
        }
    });
    axum::serve(listener, router(state)).await.map_err(Error::RawIo)
}
