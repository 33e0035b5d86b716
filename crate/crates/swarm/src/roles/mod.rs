//! Entry points of the processes of a networked run. Each role reads the
//! run directory prepared by the harness: `config.toml`, `setup/`, and the
//! `endpoints/` where servers announce their URLs.

pub mod servers;
pub mod trainer;
pub mod validator;
pub mod worker;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use swarm_core::crypto::{Address, Keypair};

use crate::config::RunConfig;
use crate::error::{Error, IoContext, Result};
use crate::net::api::{HeartbeatRequest, HeartbeatResponse, InviteDto, RegisterRequest, Role, StepDto};
use crate::net::{Http, Link};
use crate::setup::{owner_key, write_atomic, Setup};

/// Where a process finds its run and its peers.
#[derive(Debug, Clone, Default)]
pub struct RoleArgs {
    pub run_dir: PathBuf,
    pub index: u64,
    pub orchestrator: Option<String>,
    pub trainer: Option<String>,
    pub relays: Vec<String>,
    pub attack: Option<String>,
}

impl RoleArgs {
    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::load(&self.run_dir.join("config.toml"))
    }

    pub fn setup(&self) -> Result<Setup> {
        Setup::load(&self.run_dir.join("setup"))
    }

    pub fn orchestrator(&self) -> Result<&str> {
        self.orchestrator.as_deref().ok_or_else(|| Error::Config("--orchestrator is required".into()))
    }

    pub fn trainer(&self) -> Result<&str> {
        self.trainer.as_deref().ok_or_else(|| Error::Config("--trainer is required".into()))
    }
}

pub fn endpoint_file(run_dir: &Path, name: &str) -> PathBuf {
    run_dir.join("endpoints").join(format!("{name}.url"))
}

/// Announces a server's base URL to the harness.
pub fn announce(run_dir: &Path, name: &str, url: &str) -> Result<()> {
    let p = endpoint_file(run_dir, name);
    let dir = p.parent().unwrap();
    std::fs::create_dir_all(dir).at(dir)?;
    write_atomic(&p, url.as_bytes())
}

/// Waits for a server's announced URL.
pub fn await_endpoint(run_dir: &Path, name: &str, timeout: Duration) -> Result<String> {
    let p = endpoint_file(run_dir, name);
    let deadline = Instant::now() + timeout;
    loop {
        if let Ok(url) = std::fs::read_to_string(&p) {
            return Ok(url);
        }
        if Instant::now() >= deadline {
            return Err(Error::Liveness(format!("{name} did not come up")));
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[derive(Debug, Default)]
struct Flags {
    task: AtomicBool,
    restart: AtomicBool,
    evicted: AtomicBool,
    stop: AtomicBool,
}

/// A pool member's side of the orchestrator protocol.
#[derive(Clone)]
pub struct Agent {
    pub http: Http,
    pub orchestrator: String,
    pub owner: Address,
    pub pool_id: u64,
    pub role: Role,
    pub interval: Duration,
    flags: Arc<Flags>,
}

impl Agent {
    pub fn new(key: Keypair, cfg: &RunConfig, orchestrator: &str, role: Role) -> Self {
        Self {
            http: Http::new(key, Link::unshaped()),
            orchestrator: orchestrator.to_string(),
            owner: owner_key(cfg.run.seed).address(),
            pool_id: cfg.orchestrator.pool_id,
            role,
            interval: Duration::from_millis(cfg.orchestrator.heartbeat_interval_ms),
            flags: Arc::default(),
        }
    }

    pub fn address(&self) -> Address {
        self.http.address()
    }

    /// Registers, waits for the signed invite, checks it and accepts.
    pub fn join(&self) -> Result<()> {
        let req = RegisterRequest { role: self.role.clone(), endpoint: format!("pid:{}", std::process::id()), hardware: "cpu:1".into() };
        let r = self.http.post_json(&self.orchestrator, "/register", &req)?;
        if r.status == 409 && r.text()?.contains("slashed") {
            self.flags.evicted.store(true, Ordering::SeqCst);
            return Err(Error::Http("this node is slashed".into()));
        }
        let deadline = Instant::now() + self.interval * 10 + Duration::from_secs(10);
        loop {
            let r = self.http.get(&self.orchestrator, "/invite")?;
            if r.ok() {
                let inv = r.json::<InviteDto>()?.to_invite()?;
                inv.verify(&self.owner, &self.address(), self.pool_id)?;
                self.http.post_json(&self.orchestrator, "/invite/accept", &InviteDto::from(&inv))?.checked()?;
                return Ok(());
            }
            if Instant::now() >= deadline {
                return Err(Error::Liveness("no invite received".into()));
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    /// Heartbeats in the background; rejoins after being declared dead.
    pub fn spawn_heartbeats(&self) -> std::thread::JoinHandle<()> {
        let me = self.clone();
        std::thread::spawn(move || {
            while !me.flags.stop.load(Ordering::SeqCst) {
                std::thread::sleep(me.interval / 2);
                let req = HeartbeatRequest { busy: me.has_task(), finished: None };
                match me.http.post_json(&me.orchestrator, "/heartbeat", &req) {
                    Ok(r) if r.ok() => {
                        if let Ok(reply) = r.json::<HeartbeatResponse>() {
                            if reply.task.is_some() {
                                me.flags.task.store(true, Ordering::SeqCst);
                            }
                            if reply.restart {
                                me.flags.restart.store(true, Ordering::SeqCst);
                            }
                        }
                    }
                    Ok(r) if r.status == 409 => {
                        me.flags.task.store(false, Ordering::SeqCst);
                        let text = r.text().unwrap_or_default();
                        if text.contains("slashed") {
                            me.flags.evicted.store(true, Ordering::SeqCst);
                            return;
                        }
                        if text.contains("dead") {
                            tracing::warn!("declared dead; rejoining");
                            let _ = me.join();
                        }
                    }
                    Ok(r) => tracing::warn!("heartbeat: status {}", r.status),
                    Err(e) => tracing::warn!("heartbeat: {e}"),
                }
            }
        })
    }

    pub fn has_task(&self) -> bool {
        self.flags.task.load(Ordering::SeqCst)
    }

    pub fn evicted(&self) -> bool {
        self.flags.evicted.load(Ordering::SeqCst)
    }

    pub fn take_restart(&self) -> bool {
        self.flags.restart.swap(false, Ordering::SeqCst)
    }

    pub fn stop(&self) {
        self.flags.stop.store(true, Ordering::SeqCst);
    }

    pub fn log(&self, line: &str) {
        let path = format!("/nodes/{}/logs", self.address().to_hex());
        let _ = self.http.post_json(&self.orchestrator, &path, &vec![line.to_string()]);
    }
}

/// The trainer's step counter, or `None` if it cannot be reached.
pub fn poll_step(http: &Http, trainer: &str) -> Option<StepDto> {
    http.get(trainer, "/step").ok()?.checked().ok()?.json().ok()
}

/// Runs `f` on a fresh multi-threaded runtime.
pub fn block_on<F: std::future::Future<Output = Result<()>>>(f: F) -> Result<()> {
    tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().map_err(Error::RawIo)?.block_on(f)
}
