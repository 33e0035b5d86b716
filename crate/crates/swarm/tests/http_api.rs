//! Orchestrator and trainer HTTP APIs over real loopback sockets.

use std::io::{BufRead, BufReader};
use std::sync::{mpsc, Arc, Barrier, Mutex};
use std::time::Duration;

use swarm::bucket::Bucket;
use swarm::config::RunConfig;
use swarm::net::api::*;
use swarm::net::orchestrator::{serve_orchestrator, OrchState};
use swarm::net::trainer::{serve_trainer, TrainerState, TrainerStatus};
use swarm::net::{base_url, bind, Http, Link};
use swarm::roles::{block_on, Agent};
use swarm::setup::{node_key, owner_key};
use swarm_core::crypto::Keypair;
use swarm_core::trainer::TrainMetrics;

fn config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.orchestrator.heartbeat_interval_ms = 200;
    cfg.orchestrator.max_missed = 50;
    cfg
}

fn start_orchestrator(cfg: &RunConfig) -> String {
    let (tx, rx) = mpsc::channel();
    let owner = owner_key(cfg.run.seed);
    let state = Arc::new(Mutex::new(OrchState::new(owner.clone(), cfg.orchestrator_config())));
    std::thread::spawn(move || {
        block_on(async move {
            let l = bind(0).await?;
            tx.send(base_url(l.local_addr()?)).unwrap();
            serve_orchestrator(l, state, owner, Vec::new()).await
        })
    });
    rx.recv().unwrap()
}

fn joined(cfg: &RunConfig, url: &str, key: Keypair, role: Role) -> Agent {
    let a = Agent::new(key, cfg, url, role);
    a.join().unwrap();
    a
}

fn nodes(http: &Http, url: &str) -> Vec<NodeDto> {
    http.get(url, "/nodes").unwrap().checked().unwrap().json().unwrap()
}

#[test]
fn nodes_lists_members_with_their_state_and_role() {
    let cfg = config();
    let url = start_orchestrator(&cfg);
    let w = joined(&cfg, &url, node_key("worker", 0, 0), Role::RolloutWorker);
    let v = joined(&cfg, &url, node_key("validator", 0, 0), Role::Validator);
    let list = nodes(&w.http, &url);
    assert_eq!(list.len(), 2);
    for (a, role) in [(w.address(), Role::RolloutWorker), (v.address(), Role::Validator)] {
        let n = list.iter().find(|n| n.address == a.to_hex()).unwrap();
        assert_eq!(n.state, "active");
        assert_eq!(n.role, Some(role));
    }
}

#[test]
fn unsigned_or_forged_requests_are_refused() {
    let cfg = config();
    let url = start_orchestrator(&cfg);
    let body = serde_json::to_vec(&HeartbeatRequest::default()).unwrap();
    let r = ureq::post(&format!("{url}/heartbeat")).set("content-type", "application/json").send_bytes(&body);
    assert!(matches!(r, Err(ureq::Error::Status(401, _))));
    let forged = ureq::post(&format!("{url}/heartbeat"))
        .set(swarm::net::NODE_HEADER, &node_key("worker", 0, 1).address().to_hex())
        .set(swarm::net::SIGNATURE_HEADER, &"00".repeat(64))
        .send_bytes(&body);
    assert!(matches!(forged, Err(ureq::Error::Status(401, _))));
}

#[test]
fn post_tasks_creates_a_pending_task_assigned_on_the_next_heartbeat() {
    let cfg = config();
    let url = start_orchestrator(&cfg);
    let w = joined(&cfg, &url, node_key("worker", 0, 0), Role::RolloutWorker);
    let req = CreateTask { kind: "rollout-worker".into(), config: "toy".into(), target: None };
    let r = w.http.post_json(&url, "/tasks", &req).unwrap();
    assert_eq!(r.status, 201);
    let id = r.json::<CreatedTask>().unwrap().id;
    let tasks: Vec<TaskDto> = w.http.get(&url, "/tasks").unwrap().json().unwrap();
    assert_eq!(tasks.iter().find(|t| t.id == id).unwrap().status, "pending");
    let hb: HeartbeatResponse = w.http.post_json(&url, "/heartbeat", &HeartbeatRequest::default()).unwrap().json().unwrap();
    assert_eq!(hb.task.map(|t| t.id), Some(id));
    let tasks: Vec<TaskDto> = w.http.get(&url, "/tasks").unwrap().json().unwrap();
    let t = tasks.iter().find(|t| t.id == id).unwrap();
    assert_eq!((t.status.as_str(), t.assigned.clone()), ("running", Some(w.address().to_hex())));

    let bad = CreateTask { kind: "miner".into(), config: String::new(), target: None };
    assert_eq!(w.http.post_json(&url, "/tasks", &bad).unwrap().status, 400);
}

#[test]
fn one_task_goes_to_exactly_one_of_many_racing_heartbeats() {
    let cfg = config();
    let url = start_orchestrator(&cfg);
    let agents: Vec<Agent> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..100).map(|i| {
            let (cfg, url) = (&cfg, &url);
            s.spawn(move || joined(cfg, url, node_key("worker", 7, i), Role::RolloutWorker))
        }).collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let owner = Http::new(owner_key(0), Link::unshaped());
    let req = CreateTask { kind: "rollout-worker".into(), config: "toy".into(), target: None };
    let id = owner.post_json(&url, "/tasks", &req).unwrap().json::<CreatedTask>().unwrap().id;
    let barrier = Barrier::new(agents.len());
    let winners: Vec<u64> = std::thread::scope(|s| {
        let hs: Vec<_> = agents
            .iter()
            .map(|a| {
                let (barrier, url) = (&barrier, &url);
                s.spawn(move || {
                    barrier.wait();
                    let r: HeartbeatResponse = a.http.post_json(url, "/heartbeat", &HeartbeatRequest::default()).unwrap().json().unwrap();
                    r.task.map(|t| t.id)
                })
            })
            .collect();
        hs.into_iter().filter_map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(winners, vec![id]);
}

#[test]
fn restart_is_accepted_and_delivered_with_the_next_heartbeat() {
    let cfg = config();
    let url = start_orchestrator(&cfg);
    let w = joined(&cfg, &url, node_key("worker", 0, 0), Role::RolloutWorker);
    let path = format!("/nodes/{}/restart", w.address().to_hex());
    assert_eq!(w.http.post(&url, &path, b"").unwrap().status, 202);
    let hb: HeartbeatResponse = w.http.post_json(&url, "/heartbeat", &HeartbeatRequest::default()).unwrap().json().unwrap();
    assert!(hb.restart);
    let hb: HeartbeatResponse = w.http.post_json(&url, "/heartbeat", &HeartbeatRequest::default()).unwrap().json().unwrap();
    assert!(!hb.restart);
    let unknown = format!("/nodes/{}/restart", node_key("worker", 9, 9).address().to_hex());
    assert_eq!(w.http.post(&url, &unknown, b"").unwrap().status, 404);
}

#[test]
fn events_stream_replays_history_then_follows_live_changes() {
    let cfg = config();
    let url = start_orchestrator(&cfg);
    let w = joined(&cfg, &url, node_key("worker", 0, 0), Role::RolloutWorker);
    let resp = ureq::get(&format!("{url}/events?since=0")).call().unwrap();
    assert_eq!(resp.header("content-type"), Some("text/event-stream"));
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in BufReader::new(resp.into_reader()).lines() {
            let Ok(line) = line else { break };
            if let Some(data) = line.strip_prefix("data:") {
                if tx.send(serde_json::from_str::<EventDto>(data.trim()).unwrap()).is_err() {
                    break;
                }
            }
        }
    });
    let me = w.address().to_hex();
    let next = || rx.recv_timeout(Duration::from_secs(5)).unwrap();
    let mut history = Vec::new();
    while !matches!(history.last(), Some(EventDto::NodeState { state, .. }) if state == "active") {
        history.push(next());
    }
    let states: Vec<&str> = history
        .iter()
        .filter_map(|e| match e {
            EventDto::NodeState { node, state, .. } if *node == me => Some(state.as_str()),
            _ => None,
        })
        .collect();
    assert_eq!(states, ["discovered", "invited", "active"]);
    assert!(history.windows(2).all(|p| p[1].seq() == p[0].seq() + 1));

    w.http.post(&url, &format!("/nodes/{me}/restart"), b"").unwrap().checked().unwrap();
    match next() {
        EventDto::Restart { node, seq } => {
            assert_eq!(node, me);
            assert_eq!(seq, history.last().unwrap().seq() + 1);
        }
        other => panic!("unexpected event {other:?}"),
    }
}

#[test]
fn verdicts_are_taken_from_active_validators_only() {
    let cfg = config();
    let url = start_orchestrator(&cfg);
    let w = joined(&cfg, &url, node_key("worker", 0, 0), Role::RolloutWorker);
    let v = joined(&cfg, &url, node_key("validator", 0, 0), Role::Validator);
    let verdict = swarm_core::validate::Verdict::reject("step-0/x-0", swarm_core::validate::FailedCheck::Bounds, "reward out of range");
    let dto = VerdictDto::new(&w.address(), &verdict);
    assert_eq!(w.http.post_json(&url, "/verdicts", &dto).unwrap().status, 403);
    assert_eq!(v.http.post_json(&url, "/verdicts", &dto).unwrap().status, 200);
    let list = nodes(&v.http, &url);
    assert_eq!(list.iter().find(|n| n.address == w.address().to_hex()).unwrap().state, "slashed");
    let ledger = v.http.get(&url, "/ledger").unwrap().checked().unwrap().text().unwrap();
    let events = swarm::format::parse_ledger(&ledger).unwrap();
    assert!(swarm_core::ledger::verify(&events).is_ok());
    assert!(ledger.contains("bounds:step-0/x-0"));
}

fn start_trainer(dir: &std::path::Path, metrics: Vec<TrainMetrics>) -> String {
    let state = Arc::new(TrainerState {
        status: Mutex::new(TrainerStatus { step: 3, version: 3, scanning: 0, done: false, metrics }),
        bucket: Bucket::new(dir),
    });
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        block_on(async move {
            let l = bind(0).await?;
            tx.send(base_url(l.local_addr()?)).unwrap();
            serve_trainer(l, state).await
        })
    });
    rx.recv().unwrap()
}

fn metric(step: u64, micro: usize) -> TrainMetrics {
    TrainMetrics { step, micro_step: micro, grad_norm: 0.5 + micro as f64, clip_fraction: 0.25, ..TrainMetrics::default() }
}

#[test]
fn trainer_serves_step_counter_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let url = start_trainer(dir.path(), vec![metric(0, 0), metric(0, 1), metric(1, 0)]);
    let http = Http::new(node_key("worker", 0, 0), Link::unshaped());
    let st: StepDto = http.get(&url, "/step").unwrap().json().unwrap();
    assert_eq!((st.step, st.version, st.done), (3, 3, false));
    let all: Vec<MetricsDto> = http.get(&url, "/metrics").unwrap().json().unwrap();
    assert_eq!(all.len(), 3);
    assert_eq!(all[1].grad_norm, 1.5);
    let tail: Vec<MetricsDto> = http.get(&url, "/metrics?since=2").unwrap().json().unwrap();
    assert_eq!((tail.len(), tail[0].step), (1, 1));
}

#[test]
fn uploads_must_be_signed_by_the_named_node_and_are_write_once() {
    let dir = tempfile::tempdir().unwrap();
    let url = start_trainer(dir.path(), Vec::new());
    let (me, other) = (node_key("worker", 0, 0), node_key("worker", 0, 1));
    let path = format!("/rollouts/3/{}-0.txt", me.address().to_hex());
    let as_other = Http::new(other, Link::unshaped());
    assert_eq!(as_other.put(&url, &path, b"x").unwrap().status, 401);
    let as_me = Http::new(me, Link::unshaped());
    assert_eq!(as_me.put(&url, &path, b"x").unwrap().status, 201);
    assert_eq!(as_me.put(&url, &path, b"y").unwrap().status, 409);
    assert_eq!(as_me.put(&url, "/rollouts/3/nonsense", b"x").unwrap().status, 400);
}
