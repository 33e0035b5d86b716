//! Experiment runner: single runs in either mode, the asynchrony ablation
//! and scripted fault scenarios, each with assertions.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use swarm_core::adversary::Attack;
use swarm_core::crypto::Address;
use swarm_core::ledger::verify;
use swarm_core::PolicyParams;

use crate::config::{Mode, RunConfig};
use crate::error::{Error, IoContext, Result};
use crate::format;
use crate::net::api::{CreateTask, NodeDto};
use crate::net::{Http, Link};
use crate::plot;
use crate::roles::servers::relay_name;
use crate::roles::trainer::roster;
use crate::roles::validator::verdict_log;
use crate::roles::worker::worker_key;
use crate::roles::await_endpoint;
use crate::setup::{node_key, owner_key, prepare, write_atomic, Setup};
use crate::sim::{parse_consumed_log, parse_steps_csv, run_sim, write_outputs, Faults, SimOutcome};

/// Exit status of a process that gave up waiting for progress.
pub const LIVENESS_EXIT: i32 = 3;

/// One evaluated assertion.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), pass, detail: detail.into() }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub fn all_pass(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.pass)
}

/// Invariants every completed run must satisfy.
pub fn run_checks(cfg: &RunConfig, out: &SimOutcome) -> Vec<Check> {
    let mut c = Vec::new();
    let n = out.steps.len();
    c.push(Check::new("completed", n as u64 == cfg.run.steps, format!("{n} of {} steps", cfg.run.steps)));
    c.push(Check::new("ledger", out.ledger_valid, "hash chain and signatures verify"));
    let degenerate = out.consumed.iter().filter(|g| g.is_degenerate()).count();
    c.push(Check::new("online-filter", degenerate == 0, format!("{degenerate} consumed groups with zero advantage")));
    let finite = out.metrics.iter().all(|m| m.grad_norm.is_finite() && m.clip_fraction.is_finite());
    let micro = cfg.train.micro_steps as u64 * cfg.run.steps;
    c.push(Check::new("metrics", finite && out.metrics.len() as u64 == micro, format!("{} micro-step rows", out.metrics.len())));
    if !out.published_versions.is_empty() {
        let gapless = out.published_versions.iter().copied().eq(0..=n as u64);
        c.push(Check::new("versions", gapless, format!("published 0..={}", out.published_versions.last().unwrap())));
    }
    if n >= 20 {
        let reward = |s: &crate::sim::StepSummary| s.mean_task_reward;
        let (first, last) = (out.first_mean(reward, 10), out.last_mean(reward, 10));
        c.push(Check::new("improves", last > first, format!("task reward {first:.3} -> {last:.3}")));
    }
    c
}

/// Runs one experiment into `out_dir`; `exe` is the binary used to spawn
/// process-mode roles.
pub fn run_experiment(cfg: &RunConfig, out_dir: &Path, exe: &Path) -> Result<(SimOutcome, Vec<Check>)> {
    cfg.validate()?;
    let setup = prepare(cfg)?;
    let out = match cfg.run.mode {
        Mode::Sim => {
            let (out, orch) = run_sim(cfg, &setup, Faults::default())?;
            write_outputs(out_dir, cfg, &out, Some(&orch))?;
            out
        }
        Mode::Process => run_processes(exe, cfg, &setup, out_dir)?,
    };
    plot::run_plots(out_dir, &out)?;
    let checks = run_checks(cfg, &out);
    Ok((out, checks))
}

/// Rewards per level for the asynchrony ablation.
pub struct Ablation {
    pub levels: Vec<(u64, SimOutcome)>,
    pub elapsed: Duration,
}

impl Ablation {
    pub fn csv(&self) -> String {
        let mut s = String::from("step");
        for (k, _) in &self.levels {
            s.push_str(&format!(",reward_k{k},penalty_k{k}"));
        }
        s.push('\n');
        let n = self.levels.iter().map(|(_, o)| o.steps.len()).min().unwrap_or(0);
        for i in 0..n {
            s.push_str(&i.to_string());
            for (_, o) in &self.levels {
                s.push_str(&format!(",{},{}", o.steps[i].mean_task_reward, o.steps[i].mean_length_penalty));
            }
            s.push('\n');
        }
        s
    }

    /// Final-20-step reward of each level against the synchronous run.
    pub fn checks(&self, tolerance: f64, budget: Duration) -> Vec<Check> {
        let reward = |s: &crate::sim::StepSummary| s.mean_task_reward;
        let base = self.levels.iter().find(|(k, _)| *k == 0).map(|(_, o)| o.last_mean(reward, 20));
        let mut c: Vec<Check> = self
            .levels
            .iter()
            .filter(|(k, _)| *k != 0)
            .map(|(k, o)| {
                let r = o.last_mean(reward, 20);
                let d = base.map(|b| (r - b).abs()).unwrap_or(f64::INFINITY);
                Check::new(format!("ablation k={k}"), d <= tolerance, format!("final-20 reward {r:.4}, |diff| {d:.4} vs k=0"))
            })
            .collect();
        c.push(Check::new("ablation time", self.elapsed <= budget, format!("{:.1}s", self.elapsed.as_secs_f64())));
        c
    }
}

/// One sim run per asynchrony level on a shared seed and dataset.
pub fn run_ablation(base: &RunConfig, levels: &[u64], out_dir: Option<&Path>) -> Result<Ablation> {
    let started = Instant::now();
    let setup = prepare(base)?;
    let mut runs = Vec::new();
    for &k in levels {
        let mut cfg = base.clone();
        cfg.run.async_level = k;
        cfg.train.max_staleness = cfg.train.max_staleness.max(k);
        let (out, orch) = run_sim(&cfg, &setup, Faults::default())?;
        if let Some(dir) = out_dir {
            write_outputs(&dir.join(format!("k{k}")), &cfg, &out, Some(&orch))?;
        }
        runs.push((k, out));
    }
    let ab = Ablation { levels: runs, elapsed: started.elapsed() };
    if let Some(dir) = out_dir {
        write_atomic(&dir.join("ablation.csv"), ab.csv().as_bytes())?;
        plot::ablation_plot(&dir.join("ablation.svg"), &ab.levels)?;
    }
    Ok(ab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    Crash,
    Adversarial,
    CorruptShard,
    ThrottledRelay,
}

impl FaultKind {
    pub const ALL: [FaultKind; 4] = [FaultKind::Crash, FaultKind::Adversarial, FaultKind::CorruptShard, FaultKind::ThrottledRelay];

    pub fn as_str(self) -> &'static str {
        match self {
            FaultKind::Crash => "crash",
            FaultKind::Adversarial => "adversarial",
            FaultKind::CorruptShard => "corrupt-shard",
            FaultKind::ThrottledRelay => "throttled-relay",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

pub const FAULT_STEPS: u64 = 30;
const CRASH_AT: u64 = 5;
const REVIVE_AT: u64 = 15;

/// The scenario's config, derived from `base`.
pub fn fault_config(base: &RunConfig, kind: FaultKind) -> RunConfig {
    let mut cfg = base.clone();
    cfg.run.steps = FAULT_STEPS;
    cfg.run.mode = Mode::Sim;
    match kind {
        FaultKind::Crash => cfg.workers.count = cfg.workers.count.max(3),
        FaultKind::Adversarial => cfg.workers.adversarial = Attack::ALL.iter().map(|a| a.as_str().to_string()).collect(),
        FaultKind::CorruptShard => {
            cfg.shardcast.relays = cfg.shardcast.relays.max(3);
            cfg.shardcast.corrupt_relays = vec![1];
        }
        FaultKind::ThrottledRelay => {
            cfg.shardcast.relays = cfg.shardcast.relays.max(3);
            cfg.shardcast.throttled_relays = vec![0];
        }
    }
    cfg
}

fn honest_workers(cfg: &RunConfig) -> Vec<Address> {
    (0..cfg.workers.count as u64).map(|i| worker_key(cfg, i, false).address()).collect()
}

/// Runs a scripted fault scenario in the simulator and evaluates the
/// invariants it exercises.
pub fn inject_fault(base: &RunConfig, kind: FaultKind, out_dir: Option<&Path>) -> Result<(SimOutcome, Vec<Check>)> {
    inject_fault_with(base, kind, &prepare(base)?, out_dir)
}

/// As [`inject_fault`], reusing a prepared `setup` of `base`.
pub fn inject_fault_with(base: &RunConfig, kind: FaultKind, setup: &Setup, out_dir: Option<&Path>) -> Result<(SimOutcome, Vec<Check>)> {
    let cfg = fault_config(base, kind);
    let faults = match kind {
        FaultKind::Crash => Faults { crash: Some((0, CRASH_AT)), revive_at: Some(REVIVE_AT) },
        _ => Faults::default(),
    };
    let (out, orch) = run_sim(&cfg, setup, faults)?;
    if let Some(dir) = out_dir {
        write_outputs(dir, &cfg, &out, Some(&orch))?;
    }
    let mut c = run_checks(&cfg, &out);
    c.retain(|c| c.name != "improves");
    let honest = honest_workers(&cfg);
    let honest_slashed = out.slashed.iter().filter(|a| honest.contains(a)).count();
    c.push(Check::new("honest kept", honest_slashed == 0, format!("{honest_slashed} honest workers slashed")));
    let interval = cfg.orchestrator.heartbeat_interval_ms;
    match kind {
        FaultKind::Crash => {
            let me = honest[0];
            let last_beat = CRASH_AT * interval;
            let died: Vec<u64> = out.deaths.iter().filter(|(a, _)| *a == me).map(|(_, t)| *t).collect();
            let want = last_beat + cfg.orchestrator.max_missed as u64 * interval;
            c.push(Check::new("death", died == [want], format!("died at {died:?} ms, expected [{want}]")));
            let revived = (REVIVE_AT + 1) * interval;
            let reinvite = out.invites.iter().filter(|(a, t)| *a == me && *t >= revived).map(|(_, t)| *t).min();
            let ok = reinvite.is_some_and(|t| t - revived <= 2 * interval);
            c.push(Check::new("re-invite", ok, format!("re-invited at {reinvite:?} ms, revived at {revived} ms")));
        }
        FaultKind::Adversarial => {
            for (j, a) in Attack::ALL.iter().enumerate() {
                let addr = worker_key(&cfg, j as u64, true).address();
                let prefix = format!("/{}-", addr.to_hex());
                let named = out
                    .verdicts
                    .iter()
                    .filter(|v| v.file_id.contains(&prefix) && !v.is_accept())
                    .all(|v| v.failed_check == Some(a.expected_check()));
                let slashed = out.slashed.contains(&addr);
                c.push(Check::new(
                    format!("adversary {a}"),
                    slashed && named,
                    format!("slashed {slashed}, rejected by {}", a.expected_check().as_str()),
                ));
            }
        }
        FaultKind::CorruptShard => {
            let commit = out.verdicts.iter().filter(|v| v.failed_check == Some(swarm_core::validate::FailedCheck::Commitment)).count();
            let served = out.corrupt_shards_served;
            c.push(Check::new(
                "corrupt shards",
                commit == 0 && served > 0,
                format!("{served} corrupted shards served, {commit} commitment rejections"),
            ));
        }
        FaultKind::ThrottledRelay => {
            c.push(Check::new("throttled", out.throttled_requests > 0, format!("{} throttled requests", out.throttled_requests)));
        }
    }
    Ok((out, c))
}

/// Child processes of a networked run; killed when dropped.
pub struct Children {
    procs: Vec<(String, Child)>,
}

impl Children {
    fn spawn(&mut self, exe: &Path, run_dir: &Path, name: String, role: &str, index: u64, extra: &[String]) -> Result<()> {
        let logs = run_dir.join("logs");
        std::fs::create_dir_all(&logs).at(&logs)?;
        let log_path = logs.join(format!("{name}.log"));
        let log = File::create(&log_path).at(&log_path)?;
        let child = Command::new(exe)
            .args(["node", role, "--run-dir"])
            .arg(run_dir)
            .args(["--index", &index.to_string()])
            .args(extra)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(log)
            .spawn()
            .at(exe)?;
        self.procs.push((name, child));
        Ok(())
    }

    /// The first child other than `except` that exited unsuccessfully.
    fn crashed(&mut self, except: &str) -> Option<(String, Option<i32>)> {
        self.procs.iter_mut().filter(|(n, _)| n != except).find_map(|(n, c)| match c.try_wait() {
            Ok(Some(st)) if !st.success() => Some((n.clone(), st.code())),
            _ => None,
        })
    }

    fn child(&mut self, name: &str) -> Option<&mut Child> {
        self.procs.iter_mut().find(|(n, _)| n == name).map(|(_, c)| c)
    }
}

impl Drop for Children {
    fn drop(&mut self) {
        for (_, c) in &mut self.procs {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn log_tail(run_dir: &Path, name: &str) -> String {
    let text = std::fs::read_to_string(run_dir.join("logs").join(format!("{name}.log"))).unwrap_or_default();
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(5)..].join("\n")
}

/// Runs every role as a separate process over loopback HTTP and collects
/// the trainer's outputs.
pub fn run_processes(exe: &Path, cfg: &RunConfig, setup: &Setup, run_dir: &Path) -> Result<SimOutcome> {
    std::fs::create_dir_all(run_dir).at(run_dir)?;
    for stale in ["endpoints", "bucket", "logs"] {
        let _ = std::fs::remove_dir_all(run_dir.join(stale));
    }
    write_atomic(&run_dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    setup.save(&run_dir.join("setup"))?;
    let up = Duration::from_secs(30);
    let mut kids = Children { procs: Vec::new() };

    for i in 0..cfg.shardcast.relays as u64 {
        kids.spawn(exe, run_dir, relay_name(i), "relay", i, &[])?;
    }
    let relays: Vec<String> =
        (0..cfg.shardcast.relays as u64).map(|i| await_endpoint(run_dir, &relay_name(i), up)).collect::<Result<_>>()?;
    let relay_args: Vec<String> = relays.iter().flat_map(|r| ["--relays".to_string(), r.clone()]).collect();
    kids.spawn(exe, run_dir, "orchestrator".into(), "orchestrator", 0, &relay_args)?;
    let orch = await_endpoint(run_dir, "orchestrator", up)?;

    let http = Http::new(owner_key(cfg.run.seed), Link::unshaped());
    let validators: Vec<Address> = (0..cfg.validators.count as u64).map(|i| node_key("validator", cfg.run.seed, i).address()).collect();
    for (kind, nodes) in [("rollout-worker", roster(cfg)), ("validator", validators)] {
        for a in nodes {
            let req = CreateTask { kind: kind.into(), config: "toy".into(), target: Some(a.to_hex()) };
            http.post_json(&orch, "/tasks", &req)?.checked()?;
        }
    }

    let mut peers = vec!["--orchestrator".to_string(), orch.clone()];
    peers.extend(relay_args);
    kids.spawn(exe, run_dir, "trainer".into(), "trainer", 0, &peers)?;
    let trainer = await_endpoint(run_dir, "trainer", up)?;
    peers.extend(["--trainer".to_string(), trainer]);
    for i in 0..cfg.validators.count as u64 {
        kids.spawn(exe, run_dir, format!("validator-{i}"), "validator", i, &peers)?;
    }
    for i in 0..cfg.workers.count as u64 {
        kids.spawn(exe, run_dir, format!("worker-{i}"), "worker", i, &peers)?;
    }
    for (j, a) in cfg.workers.adversarial.iter().enumerate() {
        let mut extra = peers.clone();
        extra.extend(["--attack".to_string(), a.clone()]);
        kids.spawn(exe, run_dir, format!("adversary-{j}"), "worker", j as u64, &extra)?;
    }

    let deadline = Instant::now() + Duration::from_secs(cfg.run.timeout_secs);
    loop {
        if let Some(st) = kids.child("trainer").and_then(|c| c.try_wait().ok().flatten()) {
            match st.code() {
                Some(0) => break,
                Some(LIVENESS_EXIT) => return Err(Error::Liveness(format!("trainer gave up: {}", log_tail(run_dir, "trainer")))),
                code => return Err(Error::Child(format!("trainer exited with {code:?}: {}", log_tail(run_dir, "trainer")))),
            }
        }
        if let Some((name, code)) = kids.crashed("trainer") {
            return Err(Error::Child(format!("{name} exited with {code:?}: {}", log_tail(run_dir, &name))));
        }
        if Instant::now() >= deadline {
            return Err(Error::Liveness(format!("run did not finish within {}s", cfg.run.timeout_secs)));
        }
        std::thread::sleep(Duration::from_millis(50));
    }

    let ledger_text = http.get(&orch, "/ledger")?.checked()?.text()?;
    write_atomic(&run_dir.join("ledger.log"), ledger_text.as_bytes())?;
    let nodes: Vec<NodeDto> = http.get(&orch, "/nodes")?.checked()?.json()?;
    let mut verdicts_text = String::new();
    for i in 0..cfg.validators.count as u64 {
        verdicts_text.push_str(&std::fs::read_to_string(verdict_log(run_dir, i)).unwrap_or_default());
    }
    write_atomic(&run_dir.join("verdicts.log"), verdicts_text.as_bytes())?;
    collect_outcome(run_dir, &ledger_text, &verdicts_text, &nodes)
}

fn read(path: PathBuf) -> Result<String> {
    std::fs::read_to_string(&path).at(&path)
}

fn collect_outcome(run_dir: &Path, ledger: &str, verdicts: &str, nodes: &[NodeDto]) -> Result<SimOutcome> {
    let steps = parse_steps_csv(&read(run_dir.join("steps.csv"))?)?;
    let events = format::parse_ledger(ledger)?;
    let final_path = run_dir.join("final.params");
    let final_params = PolicyParams::from_bytes(&std::fs::read(&final_path).at(&final_path)?)?;
    let mut slashed: Vec<Address> =
        nodes.iter().filter(|n| n.state == "slashed").filter_map(|n| Address::from_hex(&n.address).ok()).collect();
    slashed.sort();
    Ok(SimOutcome {
        steps,
        metrics: format::parse_metrics_csv(&read(run_dir.join("metrics.csv"))?)?,
        consumed: parse_consumed_log(&read(run_dir.join("consumed.log"))?)?,
        verdicts: verdicts.lines().map(format::parse_verdict).collect::<Result<_>>()?,
        final_params: Some(final_params),
        ledger_valid: verify(&events).is_ok(),
        slashed,
        ..SimOutcome::default()
    })
}
