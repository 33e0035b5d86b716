//! Relay server, origin uploader and the client transport over HTTP.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response as HttpResponse};
use axum::routing::{get, post};
use axum::{Json, Router};
use swarm_core::crypto::{sha256, Address, Keypair};
use swarm_core::shardcast::{Manifest, Relay, RelayPolicy, Request, Response};

use super::api::{AllowlistDto, LatestDto};
use super::{authenticate, bad_request, unauthorized, ApiError, Http, Link, Reply};
use crate::broadcast::Transport;
use crate::error::{Error, Result};
use crate::format;

/// Size of the body served for `/probe`.
pub const PROBE_BYTES: usize = 64 * 1024;

pub struct RelayState {
    pub relay: Relay,
    pub owner: Address,
    pub trainer: Address,
    /// Flip a bit in every stored shard; for fault injection.
    pub corrupt: bool,
    pub allowlist_epoch: Option<u64>,
    pub started: Instant,
}

pub type SharedRelay = Arc<Mutex<RelayState>>;

impl RelayState {
    pub fn new(policy: RelayPolicy, owner: Address, trainer: Address, corrupt: bool) -> Self {
        Self { relay: Relay::new(policy), owner, trainer, corrupt, allowlist_epoch: None, started: Instant::now() }
    }

    fn now_ms(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }
}

pub fn router(state: SharedRelay) -> Router {
    Router::new()
        .route("/probe", get(probe))
        .route("/latest", get(latest))
        .route("/manifest/{version}", get(get_manifest).put(put_manifest))
        .route("/shard/{version}/{index}", get(get_shard).put(put_shard))
        .route("/allowlist", post(post_allowlist))
        .with_state(state)
}

fn serve(state: &SharedRelay, headers: &HeaderMap, path: &str, request: Request) -> Result<Response, ApiError> {
    let client = authenticate(headers, "GET", path, &[]).ok_or_else(unauthorized)?;
    let mut s = state.lock().unwrap();
    let now = s.now_ms();
    Ok(s.relay.handle(&client, &request, now))
}

fn status_of(resp: &Response) -> Option<ApiError> {
    match resp {
        Response::Denied => Some((StatusCode::FORBIDDEN, "not on the allowlist".into())),
        Response::Throttled => Some((StatusCode::TOO_MANY_REQUESTS, "rate limited".into())),
        Response::NotFound => Some((StatusCode::NOT_FOUND, "not found".into())),
        _ => None,
    }
}

async fn probe(State(s): State<SharedRelay>, headers: HeaderMap) -> Result<HttpResponse, ApiError> {
    let resp = serve(&s, &headers, "/probe", Request::Probe)?;
    match status_of(&resp) {
        Some(e) => Err(e),
        None => Ok(vec![0u8; PROBE_BYTES].into_response()),
    }
}

async fn latest(State(s): State<SharedRelay>, headers: HeaderMap) -> Result<Json<LatestDto>, ApiError> {
    match serve(&s, &headers, "/latest", Request::Latest)? {
        Response::Latest(version) => Ok(Json(LatestDto { version })),
        other => Err(status_of(&other).unwrap_or_else(|| bad_request("unexpected"))),
    }
}

async fn get_manifest(State(s): State<SharedRelay>, headers: HeaderMap, Path(version): Path<u64>) -> Result<String, ApiError> {
    match serve(&s, &headers, &format!("/manifest/{version}"), Request::Manifest(version))? {
        Response::Manifest(m) => Ok(format::encode_manifest(&m)),
        other => Err(status_of(&other).unwrap_or_else(|| bad_request("unexpected"))),
    }
}

async fn get_shard(
    State(s): State<SharedRelay>,
    headers: HeaderMap,
    Path((version, index)): Path<(u64, usize)>,
) -> Result<Vec<u8>, ApiError> {
    match serve(&s, &headers, &format!("/shard/{version}/{index}"), Request::Shard { version, index })? {
        Response::Shard(b) => Ok(b),
        other => Err(status_of(&other).unwrap_or_else(|| bad_request("unexpected"))),
    }
}

fn from_trainer(s: &RelayState, headers: &HeaderMap, method: &str, path: &str, body: &[u8]) -> Result<(), ApiError> {
    match authenticate(headers, method, path, body) {
        Some(a) if a == s.trainer => Ok(()),
        _ => Err(unauthorized()),
    }
}

async fn put_manifest(State(s): State<SharedRelay>, headers: HeaderMap, Path(version): Path<u64>, body: Bytes) -> Result<StatusCode, ApiError> {
    let mut s = s.lock().unwrap();
    from_trainer(&s, &headers, "PUT", &format!("/manifest/{version}"), &body)?;
    let text = std::str::from_utf8(&body).map_err(|_| bad_request("manifest is not UTF-8"))?;
    let m = format::parse_manifest(text).map_err(|e| bad_request(e.to_string()))?;
    if m.version != version || m.verify(&s.trainer).is_err() {
        return Err(bad_request("manifest signature or version mismatch"));
    }
    s.relay.store.insert_manifest(m).map_err(|e| (StatusCode::CONFLICT, e.to_string()))?;
    Ok(StatusCode::CREATED)
}

async fn put_shard(
    State(s): State<SharedRelay>,
    headers: HeaderMap,
    Path((version, index)): Path<(u64, usize)>,
    body: Bytes,
) -> Result<StatusCode, ApiError> {
    let mut s = s.lock().unwrap();
    from_trainer(&s, &headers, "PUT", &format!("/shard/{version}/{index}"), &body)?;
    let m = s.relay.store.manifest(version).ok_or((StatusCode::NOT_FOUND, "unknown version".into()))?;
    if m.shard_digests.get(index) != Some(&sha256(&body)) {
        return Err(bad_request("shard digest mismatch"));
    }
    let mut bytes = body.to_vec();
    if s.corrupt && !bytes.is_empty() {
        let at = (index * 7919) % bytes.len();
        bytes[at] ^= 0x10;
    }
    s.relay.store.insert_shard(version, index, bytes).map_err(|e| bad_request(e.to_string()))?;
    Ok(StatusCode::CREATED)
}

async fn post_allowlist(State(s): State<SharedRelay>, Json(list): Json<AllowlistDto>) -> Result<StatusCode, ApiError> {
    let mut s = s.lock().unwrap();
    let addrs = list.verify(&s.owner).map_err(|_| unauthorized())?;
    if s.allowlist_epoch.is_some_and(|e| list.epoch <= e) {
        return Ok(StatusCode::OK);
    }
    s.allowlist_epoch = Some(list.epoch);
    s.relay.set_allowlist(addrs.into_iter().collect());
    Ok(StatusCode::OK)
}

/// Serves a relay until the process exits.
pub async fn serve_relay(listener: tokio::net::TcpListener, state: SharedRelay) -> Result<()> {
    axum::serve(listener, router(state)).await.map_err(Error::RawIo)
}

/// Relays reached over HTTP, one shaped client per relay.
pub struct HttpRelays {
    pub urls: Vec<String>,
    pub clients: Vec<Http>,
}

impl HttpRelays {
    pub fn new(urls: Vec<String>, key: &Keypair, links: &[Link]) -> Self {
        let clients = urls.iter().enumerate().map(|(i, _)| Http::new(key.clone(), links.get(i).copied().unwrap_or_default())).collect();
        Self { urls, clients }
    }

    pub fn latest(&self) -> Option<u64> {
        self.urls
            .iter()
            .zip(&self.clients)
            .filter_map(|(u, c)| c.get(u, "/latest").ok()?.checked().ok()?.json::<LatestDto>().ok()?.version)
            .max()
    }
}

fn to_response(reply: Reply, ok: impl FnOnce(Vec<u8>) -> Option<Response>) -> Response {
    match reply.status {
        200 => ok(reply.body).unwrap_or(Response::NotFound),
        403 | 401 => Response::Denied,
        429 => Response::Throttled,
        _ => Response::NotFound,
    }
}

impl Transport for HttpRelays {
    fn relay_count(&self) -> usize {
        self.urls.len()
    }

    fn send(&mut self, relay: usize, request: &Request) -> (Response, f64) {
        let (url, http) = (&self.urls[relay], &self.clients[relay]);
        let path = match request {
            Request::Probe => "/probe".to_string(),
            Request::Latest => "/latest".to_string(),
            Request::Manifest(v) => format!("/manifest/{v}"),
            Request::Shard { version, index } => format!("/shard/{version}/{index}"),
        };
        let Ok(reply) = http.get(url, &path) else {
            return (Response::NotFound, 0.0);
        };
        let bw = reply.bytes_per_sec;
        let resp = to_response(reply, |body| match request {
            Request::Probe => Some(Response::Probe),
            Request::Latest => serde_json::from_slice::<LatestDto>(&body).ok().map(|l| Response::Latest(l.version)),
            Request::Manifest(_) => format::parse_manifest(std::str::from_utf8(&body).ok()?).ok().map(Response::Manifest),
            Request::Shard { .. } => Some(Response::Shard(body)),
        });
        (resp, bw)
    }
}

/// Completion time of each shard upload, per relay.
#[derive(Debug, Clone)]
pub struct UploadTimes {
    pub shards: Vec<Vec<Instant>>,
}

impl UploadTimes {
    /// When the last shard reached its last relay.
    pub fn finished(&self) -> Option<Instant> {
        self.shards.iter().flat_map(|s| s.iter().copied()).max()
    }
}

/// Origin side: pushes `bytes` as `version` to every relay, one thread per
/// relay, each upload paced by `link`.
pub fn publish_http(relays: &[String], trainer: &Keypair, bytes: &[u8], version: u64, shard_size: usize, link: Link) -> Result<UploadTimes> {
    let m = Manifest::build(bytes, version, shard_size, trainer);
    let text = format::encode_manifest(&m);
    let results: Vec<Result<Vec<Instant>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = relays
            .iter()
            .map(|url| {
                let text = &text;
                let m = &m;
                scope.spawn(move || {
                    let http = Http::new(trainer.clone(), link);
                    http.put(url, &format!("/manifest/{version}"), text.as_bytes())?.checked()?;
                    let mut times = Vec::with_capacity(m.num_shards());
                    for (i, shard) in bytes.chunks(shard_size).enumerate() {
                        http.put(url, &format!("/shard/{version}/{i}"), shard)?.checked()?;
                        times.push(Instant::now());
                    }
                    Ok(times)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(Error::Http("upload thread panicked".into())))).collect()
    });
    Ok(UploadTimes { shards: results.into_iter().collect::<Result<_>>()? })
}

/// Pushes a signed allowlist to every relay.
pub fn push_allowlist(relays: &[String], owner: &Keypair, members: impl IntoIterator<Item = Address>, epoch: u64) -> Result<()> {
    let list = AllowlistDto::signed(members, epoch, owner);
    let http = Http::new(owner.clone(), Link::unshaped());
    for url in relays {
        http.post_json(url, "/allowlist", &list)?.checked()?;
    }
    Ok(())
}
