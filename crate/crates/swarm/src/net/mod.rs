//! Loopback HTTP plumbing shared by every process: signed requests, link
//! shaping and a blocking client.

pub mod api;
pub mod orchestrator;
pub mod relay;
pub mod trainer;

use std::io::Read;
use std::time::{Duration, Instant};

use axum::http::{HeaderMap, StatusCode};
use swarm_core::crypto::{hex_decode, hex_encode, sha256, Address, Keypair};

use crate::error::{Error, Result};

pub const NODE_HEADER: &str = "x-swarm-node";
pub const SIGNATURE_HEADER: &str = "x-swarm-signature";

/// Bytes a client signs: method, path and body digest.
pub fn request_message(method: &str, path: &str, body: &[u8]) -> Vec<u8> {
    let mut m = format!("swarm-request {method} {path} ").into_bytes();
    m.extend_from_slice(&sha256(body));
    m
}

/// The signer of a request, if its signature checks out.
pub fn authenticate(headers: &HeaderMap, method: &str, path: &str, body: &[u8]) -> Option<Address> {
    let node = Address::from_hex(headers.get(NODE_HEADER)?.to_str().ok()?).ok()?;
    let sig = hex_decode::<64>(headers.get(SIGNATURE_HEADER)?.to_str().ok()?).ok()?;
    node.verify(&request_message(method, path, body), &sig).ok()?;
    Some(node)
}

/// Per-link shaping, applied by the sending or receiving client.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Link {
    /// Bytes per second; 0 means unshaped.
    pub bytes_per_sec: u64,
    pub latency_ms: u64,
}

impl Link {
    pub fn unshaped() -> Self {
        Self::default()
    }

    pub fn capped(bytes_per_sec: u64) -> Self {
        Self { bytes_per_sec, latency_ms: 0 }
    }

    /// Time `bytes` take on this link.
    pub fn transfer_time(&self, bytes: usize) -> Duration {
        let wire = if self.bytes_per_sec == 0 { 0.0 } else { bytes as f64 / self.bytes_per_sec as f64 };
        Duration::from_millis(self.latency_ms) + Duration::from_secs_f64(wire)
    }
}

/// Reader that never runs faster than its link.
pub struct Shaped<R> {
    inner: R,
    link: Link,
    start: Option<Instant>,
    done: usize,
}

const SHAPED_CHUNK: usize = 16 * 1024;

impl<R: Read> Shaped<R> {
    pub fn new(inner: R, link: Link) -> Self {
        Self { inner, link, start: None, done: 0 }
    }
}

impl<R: Read> Read for Shaped<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let start = *self.start.get_or_insert_with(|| {
            std::thread::sleep(Duration::from_millis(self.link.latency_ms));
            Instant::now()
        });
        let cap = if self.link.bytes_per_sec == 0 { buf.len() } else { buf.len().min(SHAPED_CHUNK) };
        let n = self.inner.read(&mut buf[..cap])?;
        self.done += n;
        if self.link.bytes_per_sec > 0 {
            let due = Duration::from_secs_f64(self.done as f64 / self.link.bytes_per_sec as f64);
            if let Some(wait) = due.checked_sub(start.elapsed()) {
                std::thread::sleep(wait);
            }
        }
        Ok(n)
    }
}

/// Outcome of one HTTP exchange that reached the server.
#[derive(Debug, Clone)]
pub struct Reply {
    pub status: u16,
    pub body: Vec<u8>,
    /// Observed body rate in bytes per second.
    pub bytes_per_sec: f64,
}

impl Reply {
    pub fn ok(&self) -> bool {
        (200..300).contains(&self.status)
    }

    pub fn text(&self) -> Result<String> {
        String::from_utf8(self.body.clone()).map_err(|_| Error::Http("body is not UTF-8".into()))
    }

    pub fn json<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_slice(&self.body).map_err(|e| Error::Http(format!("bad JSON reply: {e}")))
    }

    /// Errors on any non-2xx status.
    pub fn checked(self) -> Result<Self> {
        if self.ok() {
            Ok(self)
        } else {
            Err(Error::Http(format!("status {}: {}", self.status, String::from_utf8_lossy(&self.body))))
        }
    }
}

/// Blocking client that signs every request as `key`.
#[derive(Clone)]
pub struct Http {
    agent: ureq::Agent,
    key: Keypair,
    pub link: Link,
}

impl Http {
    pub fn new(key: Keypair, link: Link) -> Self {
        let agent = ureq::AgentBuilder::new().timeout_connect(Duration::from_secs(2)).timeout(Duration::from_secs(60)).build();
        Self { agent, key, link }
    }

    pub fn address(&self) -> Address {
        self.key.address()
    }

    pub fn get(&self, base: &str, path: &str) -> Result<Reply> {
        self.send("GET", base, path, &[])
    }

    pub fn post(&self, base: &str, path: &str, body: &[u8]) -> Result<Reply> {
        self.send("POST", base, path, body)
    }

    pub fn put(&self, base: &str, path: &str, body: &[u8]) -> Result<Reply> {
        self.send("PUT", base, path, body)
    }

    pub fn post_json(&self, base: &str, path: &str, value: &impl serde::Serialize) -> Result<Reply> {
        let body = serde_json::to_vec(value).map_err(|e| Error::Http(e.to_string()))?;
        self.request("POST", base, path, &body, "application/json")
    }

    /// One signed request. Only transport failures are errors; any status
    /// comes back as a `Reply`.
    pub fn send(&self, method: &str, base: &str, path: &str, body: &[u8]) -> Result<Reply> {
        self.request(method, base, path, body, "application/octet-stream")
    }

    fn request(&self, method: &str, base: &str, path: &str, body: &[u8], content_type: &str) -> Result<Reply> {
        let sig = self.key.sign(&request_message(method, path, body));
        let req = self
            .agent
            .request(method, &format!("{base}{path}"))
            .set(NODE_HEADER, &self.key.address().to_hex())
            .set(SIGNATURE_HEADER, &hex_encode(&sig));
        let start = Instant::now();
        let resp = if body.is_empty() && method == "GET" {
            req.call()
        } else {
            req.set("content-length", &body.len().to_string()).set("content-type", content_type).send(Shaped::new(body, self.link))
        };
        let resp = match resp {
            Ok(r) => r,
            Err(ureq::Error::Status(_, r)) => r,
            Err(e) => return Err(e.into()),
        };
        let status = resp.status();
        let mut out = Vec::new();
        Shaped::new(resp.into_reader(), if method == "GET" { self.link } else { Link::unshaped() })
            .read_to_end(&mut out)
            .map_err(|e| Error::Http(e.to_string()))?;
        let secs = start.elapsed().as_secs_f64().max(1e-6);
        let moved = if method == "GET" { out.len() } else { body.len() };
        Ok(Reply { status, bytes_per_sec: moved as f64 / secs, body: out })
    }
}

/// Status code and message for a rejected request.
pub type ApiError = (StatusCode, String);

pub fn bad_request(msg: impl Into<String>) -> ApiError {
    (StatusCode::BAD_REQUEST, msg.into())
}

pub fn unauthorized() -> ApiError {
    (StatusCode::UNAUTHORIZED, "missing or bad request signature".into())
}

/// Binds `127.0.0.1:port` (0 picks a free port).
pub async fn bind(port: u16) -> Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(("127.0.0.1", port)).await.map_err(Error::RawIo)
}

pub fn base_url(addr: std::net::SocketAddr) -> String {
    format!("http://{addr}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shaped_reader_respects_rate() {
        let data = vec![0u8; 100_000];
        let start = Instant::now();
        let mut out = Vec::new();
        Shaped::new(&data[..], Link::capped(1_000_000)).read_to_end(&mut out).unwrap();
        assert_eq!(out.len(), data.len());
        assert!(start.elapsed() >= Duration::from_millis(95), "{:?}", start.elapsed());
    }

    #[test]
    fn signatures_bind_method_path_and_body() {
        let key = Keypair::derive("node", 1);
        let sig = key.sign(&request_message("POST", "/heartbeat", b"{}"));
        let mut h = HeaderMap::new();
        h.insert(NODE_HEADER, key.address().to_hex().parse().unwrap());
        h.insert(SIGNATURE_HEADER, hex_encode(&sig).parse().unwrap());
        assert_eq!(authenticate(&h, "POST", "/heartbeat", b"{}"), Some(key.address()));
        assert_eq!(authenticate(&h, "POST", "/heartbeat", b"{ }"), None);
        assert_eq!(authenticate(&h, "POST", "/register", b"{}"), None);
        assert_eq!(authenticate(&h, "GET", "/heartbeat", b"{}"), None);
    }
}
