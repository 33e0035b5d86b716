//! Deterministic single-process run: trainer, workers, validators, relays
//! and orchestrator exchanging the same messages as in process mode, on a
//! logical clock. Same config and setup give byte-identical outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use swarm_core::adversary::{quantize, Attack, Attacker};
use swarm_core::crypto::{Address, Keypair};
use swarm_core::orchestrator::{NodeState, NodeStatus, Orchestrator, TaskKind};
use swarm_core::rollout::{build_file, RolloutFile};
use swarm_core::shardcast::RETAINED_VERSIONS;
use swarm_core::tasks::Task;
use swarm_core::trainer::{rollout_version, BatchCollector, GroupBatch, Offer, StepLedger, TrainMetrics, Trainer};
use swarm_core::validate::{validate_file, FailedCheck, ValidatorConfig, Verdict};
use swarm_core::{Policy, PolicyParams};

use crate::broadcast::{Client, SimNetwork};
use crate::config::RunConfig;
use crate::error::{parse_err, Error, Result};
use crate::format;
use crate::setup::{node_key, owner_key, trainer_key, write_atomic, Setup};

/// Per-step summary, one row of `steps.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSummary {
    pub step: u64,
    pub rollout_version: u64,
    pub mean_task_reward: f64,
    pub mean_length_penalty: f64,
    pub groups: usize,
    pub discarded_degenerate: usize,
    pub discarded_stale: usize,
    pub files: usize,
    pub rejected_files: usize,
}

pub const STEPS_HEADER: &str =
    "step,rollout_version,mean_task_reward,mean_length_penalty,groups,discarded_degenerate,discarded_stale,files,rejected_files\n";

impl StepSummary {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}\n",
            self.step,
            self.rollout_version,
            self.mean_task_reward,
            self.mean_length_penalty,
            self.groups,
            self.discarded_degenerate,
            self.discarded_stale,
            self.files,
            self.rejected_files
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 9 {
            return Err(parse_err(format!("steps row has {} fields", f.len())));
        }
        let int = |s: &str| s.parse::<u64>().map_err(|_| parse_err(format!("bad integer {s:?}")));
        let real = |s: &str| s.parse::<f64>().map_err(|_| parse_err(format!("bad real {s:?}")));
        Ok(Self {
            step: int(f[0])?,
            rollout_version: int(f[1])?,
            mean_task_reward: real(f[2])?,
            mean_length_penalty: real(f[3])?,
            groups: int(f[4])? as usize,
            discarded_degenerate: int(f[5])? as usize,
            discarded_stale: int(f[6])? as usize,
            files: int(f[7])? as usize,
            rejected_files: int(f[8])? as usize,
        })
    }
}

pub fn parse_steps_csv(text: &str) -> Result<Vec<StepSummary>> {
    let mut lines = text.lines();
    if lines.next().map(|h| format!("{h}\n")) != Some(STEPS_HEADER.to_string()) {
        return Err(parse_err("steps.csv header mismatch"));
    }
    lines.map(StepSummary::parse_row).collect()
}

/// One group handed to the optimizer, as recorded in `consumed.log`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsumedGroup {
    pub step: u64,
    pub task_id: u64,
    pub checkpoint_version: u64,
    pub rewards: Vec<f64>,
}

impl ConsumedGroup {
    pub fn line(&self) -> String {
        let rewards: Vec<String> = self.rewards.iter().map(|r| format::f64_hex(*r)).collect();
        format!("batch step={} task={} version={} rewards={}\n", self.step, self.task_id, self.checkpoint_version, rewards.join(","))
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f = format::fields(line, "batch", &["step", "task", "version", "rewards"])?;
        let num = |s: &str| s.parse::<u64>().map_err(|_| parse_err(format!("bad integer {s:?}")));
        Ok(Self {
            step: num(f[0])?,
            task_id: num(f[1])?,
            checkpoint_version: num(f[2])?,
            rewards: f[3].split(',').map(format::parse_f64_hex).collect::<Result<_>>()?,
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.rewards.windows(2).all(|w| w[0] == w[1])
    }
}

pub fn parse_consumed_log(text: &str) -> Result<Vec<ConsumedGroup>> {
    format::lines(text)?.into_iter().map(ConsumedGroup::parse).collect()
}

/// Everything a run produced.
#[derive(Debug, Clone, Default)]
pub struct SimOutcome {
    pub steps: Vec<StepSummary>,
    pub metrics: Vec<TrainMetrics>,
    pub consumed: Vec<ConsumedGroup>,
    pub verdicts: Vec<Verdict>,
    pub published_versions: Vec<u64>,
    pub final_params: Option<PolicyParams>,
    /// Largest number of versions any relay held at any time.
    pub max_relay_versions: usize,
    pub ledger_valid: bool,
    pub slashed: Vec<Address>,
    /// Node and logical time at which it was declared dead.
    pub deaths: Vec<(Address, u64)>,
    /// Node and logical time at which it was (re-)invited.
    pub invites: Vec<(Address, u64)>,
    pub throttled_requests: u64,
    pub corrupt_shards_served: u64,
}

impl SimOutcome {
    /// Mean of a per-step series over `range` of the completed steps.
    pub fn window_mean(&self, f: impl Fn(&StepSummary) -> f64, range: std::ops::Range<usize>) -> f64 {
        let xs = &self.steps[range.start.min(self.steps.len())..range.end.min(self.steps.len())];
        xs.iter().map(f).sum::<f64>() / xs.len().max(1) as f64
    }

    pub fn first_mean(&self, f: impl Fn(&StepSummary) -> f64, n: usize) -> f64 {
        self.window_mean(f, 0..n)
    }

    pub fn last_mean(&self, f: impl Fn(&StepSummary) -> f64, n: usize) -> f64 {
        let len = self.steps.len();
        self.window_mean(f, len.saturating_sub(n)..len)
    }

    pub fn steps_csv(&self) -> String {
        let mut s = STEPS_HEADER.to_string();
        self.steps.iter().for_each(|r| s.push_str(&r.csv_row()));
        s
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = format::METRICS_HEADER.to_string();
        self.metrics.iter().for_each(|m| s.push_str(&format::metrics_row(m)));
        s
    }

    pub fn consumed_log(&self) -> String {
        self.consumed.iter().map(ConsumedGroup::line).collect()
    }
}

/// Scripted disturbances for fault-injection runs.
#[derive(Debug, Clone, Default)]
pub struct Faults {
    /// Worker index and the step at which it stops heartbeating and working.
    pub crash: Option<(usize, u64)>,
    /// Step at which the crashed worker comes back and re-registers.
    pub revive_at: Option<u64>,
}

pub fn task_index(dataset: &[Task]) -> BTreeMap<u64, usize> {
    dataset.iter().enumerate().map(|(i, t)| (t.task_id, i)).collect()
}

/// The file a worker uploads: honest, or forged per `attack`. A forgery
/// that cannot be built for this submission falls back to an honest file.
#[allow(clippy::too_many_arguments)]
pub fn make_file(
    policy: &Policy,
    attack: Option<Attack>,
    dataset: &[Task],
    key: &Keypair,
    step: u64,
    submission: u64,
    version: u64,
    vcfg: &ValidatorConfig,
) -> Result<RolloutFile> {
    let honest = || build_file(policy, dataset, key, step, submission, version, &vcfg.rollout);
    let Some(attack) = attack else {
        return Ok(honest()?);
    };
    let wrong = Policy::new(quantize(policy.params(), 1.0 / 64.0));
    let atk = Attacker { policy, wrong: &wrong, dataset, key, step, version, cfg: vcfg };
    match atk.forge(attack, submission) {
        Ok(f) => Ok(f),
        Err(_) => Ok(honest()?),
    }
}

/// Parses an upload; a parse failure is a schema rejection.
pub fn parse_upload(text: &str, file_id: &str) -> std::result::Result<RolloutFile, Verdict> {
    format::parse_rollout_file(text).map_err(|e| Verdict::reject(file_id, FailedCheck::Schema, e.to_string()))
}

/// Offers every group of an accepted file; returns how many were taken.
pub fn offer_file(collector: &mut BatchCollector, file: &RolloutFile, dataset: &[Task], index: &BTreeMap<u64, usize>, group_size: usize) -> usize {
    let mut taken = 0;
    for group in file.groups(group_size) {
        let Some(&i) = index.get(&group[0].task_id) else { continue };
        if collector.offer(GroupBatch::from_records(&dataset[i].prompt_tokens, group)) == Offer::Taken {
            taken += 1;
        }
    }
    taken
}

/// What one optimizer step consumed and produced.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub summary: StepSummary,
    pub consumed: Vec<ConsumedGroup>,
    pub metrics: Vec<TrainMetrics>,
}

/// Trains on a full collector and marks the step consumed.
pub fn consume_step(
    trainer: &mut Trainer,
    ledger: &mut StepLedger,
    mut collector: BatchCollector,
    version: u64,
    files: usize,
    rejected: usize,
) -> Result<StepOutput> {
    let step = collector.step;
    let discarded = (collector.discarded_degenerate, collector.discarded_stale);
    let batch = collector.take().ok_or_else(|| Error::Liveness(format!("step {step}: batch incomplete")))?;
    let consumed = batch
        .iter()
        .map(|b| ConsumedGroup { step, task_id: b.prompt_id, checkpoint_version: b.checkpoint_version, rewards: b.rewards.clone() })
        .collect();
    let report = trainer.train_step(&batch)?;
    ledger.mark_consumed(step);
    Ok(StepOutput {
        summary: StepSummary {
            step,
            rollout_version: version,
            mean_task_reward: report.mean_task_reward,
            mean_length_penalty: report.mean_length_penalty,
            groups: report.groups,
            discarded_degenerate: discarded.0,
            discarded_stale: discarded.1,
            files,
            rejected_files: rejected,
        },
        consumed,
        metrics: report.metrics,
    })
}

struct Node {
    key: Keypair,
    client: Client,
    checkpoints: BTreeMap<u64, Policy>,
    has_task: bool,
    crashed: bool,
}

impl Node {
    fn address(&self) -> Address {
        self.key.address()
    }

    fn remember(&mut self, version: u64, bytes: &[u8]) -> Result<()> {
        self.checkpoints.insert(version, Policy::new(PolicyParams::from_bytes(bytes)?));
        while self.checkpoints.len() > RETAINED_VERSIONS + 1 {
            self.checkpoints.pop_first();
        }
        Ok(())
    }
}

struct Worker {
    node: Node,
    attack: Option<Attack>,
    submissions: u64,
}

pub struct Sim<'a> {
    cfg: RunConfig,
    dataset: &'a [Task],
    task_index: BTreeMap<u64, usize>,
    trainer_key: Keypair,
    trainer: Trainer,
    step_ledger: StepLedger,
    orch: Orchestrator,
    net: SimNetwork,
    workers: Vec<Worker>,
    validators: Vec<Node>,
    vcfg: ValidatorConfig,
    faults: Faults,
    clock_ms: u64,
    next_worker: usize,
    next_validator: usize,
    out: SimOutcome,
}

impl<'a> Sim<'a> {
    pub fn new(cfg: &RunConfig, setup: &'a Setup, faults: Faults) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.run.seed;
        let trainer_key = trainer_key(seed);
        let sel = cfg.selection_config();
        let relays = cfg.shardcast.relays;
        let node = |label: &str, i: u64| {
            let key = node_key(label, seed, i);
            let client = Client::new(trainer_key.address(), relays, sel.clone(), key.address().seed_int());
            Node { key, client, checkpoints: BTreeMap::new(), has_task: false, crashed: false }
        };
        let mut workers: Vec<Worker> =
            (0..cfg.workers.count).map(|i| Worker { node: node("worker", i as u64), attack: None, submissions: 0 }).collect();
        for (j, a) in cfg.workers.adversarial.iter().enumerate() {
            let attack = Attack::parse(a).ok_or_else(|| Error::Config(format!("unknown attack {a:?}")))?;
            workers.push(Worker { node: node("adversary", j as u64), attack: Some(attack), submissions: 0 });
        }
        let validators = (0..cfg.validators.count).map(|i| node("validator", i as u64)).collect();
        let corrupt: BTreeSet<usize> = cfg.shardcast.corrupt_relays.iter().copied().collect();
        let net = SimNetwork::with_policies((0..relays).map(|i| cfg.relay_policy_of(i)).collect(), corrupt);
        Ok(Self {
            vcfg: cfg.validator_config(),
            cfg: cfg.clone(),
            dataset: &setup.dataset,
            task_index: task_index(&setup.dataset),
            trainer: Trainer::new(setup.base.clone(), cfg.train_config()?)?,
            trainer_key,
            step_ledger: StepLedger::new(cfg.train.prompts_per_step),
            orch: Orchestrator::new(owner_key(seed), cfg.orchestrator_config()),
            net,
            workers,
            validators,
            faults,
            clock_ms: 0,
            next_worker: 0,
            next_validator: 0,
            out: SimOutcome::default(),
        })
    }

    pub fn orchestrator(&self) -> &Orchestrator {
        &self.orch
    }

    fn node_mut(&mut self, i: usize) -> &mut Node {
        let nw = self.workers.len();
        if i < nw {
            &mut self.workers[i].node
        } else {
            &mut self.validators[i - nw]
        }
    }

    fn node_count(&self) -> usize {
        self.workers.len() + self.validators.len()
    }

    fn publish(&mut self, version: u64) -> Result<()> {
        let bytes = self.trainer.params().to_bytes();
        self.net.publish(&bytes, version, self.cfg.shardcast.shard_size, &self.trainer_key)?;
        self.out.published_versions.push(version);
        let held = self.net.relays.iter().map(|r| r.store.len()).max().unwrap_or(0);
        self.out.max_relay_versions = self.out.max_relay_versions.max(held);
        Ok(())
    }

    fn sync_allowlist(&mut self) {
        let allowed = self.orch.allowlist();
        self.net.set_allowlist(&allowed);
    }

    fn accept_invites(&mut self, invites: Vec<swarm_core::orchestrator::Invite>) -> Result<()> {
        let (owner, pool, now) = (self.orch.owner(), self.cfg.orchestrator.pool_id, self.clock_ms);
        for inv in invites {
            self.out.invites.push((inv.node, now));
            let crashed = (0..self.node_count()).any(|i| {
                let n = self.node_mut(i);
                n.address() == inv.node && n.crashed
            });
            if !crashed && inv.verify(&owner, &inv.node, pool).is_ok() {
                self.orch.accept_invite(&inv, now)?;
            }
        }
        Ok(())
    }

    /// Discovery, invites, task creation and a first probe of every relay.
    fn join_all(&mut self) -> Result<()> {
        let now = self.clock_ms;
        let nodes: Vec<(Address, TaskKind)> = self
            .workers
            .iter()
            .map(|w| (w.node.address(), TaskKind::RolloutWorker))
            .chain(self.validators.iter().map(|v| (v.address(), TaskKind::Validator)))
            .collect();
        for (a, kind) in &nodes {
            self.orch.register(*a, &format!("sim://{}/{}", kind.as_str(), &a.to_hex()[..8]), "cpu:1", now)?;
        }
        let invites = self.orch.sweep(now).invites;
        self.accept_invites(invites)?;
        for (a, kind) in &nodes {
            self.orch.create_task(*kind, "sim", Some(*a));
        }
        self.sync_allowlist();
        for i in 0..self.node_count() {
            let now = self.net.now_ms;
            let mut net = std::mem::replace(&mut self.net, SimNetwork::new(0, Default::default(), BTreeSet::new()));
            let n = self.node_mut(i);
            let me = n.address();
            n.client.probe(&mut net.link(me), now);
            self.net = net;
        }
        Ok(())
    }

    /// One heartbeat interval: every live node heartbeats, then one sweep.
    fn tick(&mut self, step: u64) -> Result<()> {
        self.clock_ms += self.cfg.orchestrator.heartbeat_interval_ms;
        self.net.now_ms = self.clock_ms;
        let now = self.clock_ms;
        if let Some((w, at)) = self.faults.crash {
            if step == at {
                self.workers[w].node.crashed = true;
            }
            if self.faults.revive_at == Some(step) && self.workers[w].node.crashed {
                let node = &mut self.workers[w].node;
                node.crashed = false;
                node.has_task = false;
                let a = node.address();
                if self.orch.node(&a).is_some_and(|n| n.state == NodeState::Dead) {
                    self.orch.register(a, "sim://rollout_worker/revived", "cpu:1", now)?;
                }
            }
        }
        for i in 0..self.node_count() {
            let n = self.node_mut(i);
            if n.crashed {
                continue;
            }
            let (a, busy) = (n.address(), n.has_task);
            if let Ok(reply) = self.orch.heartbeat(&a, &NodeStatus { busy, finished: None }, now) {
                if reply.task.is_some() {
                    self.node_mut(i).has_task = true;
                }
            }
        }
        let swept = self.orch.sweep(now);
        self.out.deaths.extend(swept.died.iter().map(|a| (*a, now)));
        self.accept_invites(swept.invites)?;
        self.sync_allowlist();
        Ok(())
    }

    fn working(&self, n: &Node) -> bool {
        !n.crashed && n.has_task && self.orch.node(&n.address()).is_some_and(|r| r.state == NodeState::Active)
    }

    fn pick_worker(&mut self) -> Option<usize> {
        let n = self.workers.len();
        (0..n).find_map(|_| {
            let i = self.next_worker % n;
            self.next_worker += 1;
            self.working(&self.workers[i].node).then_some(i)
        })
    }

    fn pick_validator(&mut self) -> Option<usize> {
        let n = self.validators.len();
        (0..n).find_map(|_| {
            let i = self.next_validator % n;
            self.next_validator += 1;
            self.working(&self.validators[i]).then_some(i)
        })
    }

    /// Worker `wi` fetches its checkpoint and writes one file for `step`.
    fn produce(&mut self, wi: usize, step: u64, version: u64) -> Result<Option<(String, String)>> {
        let newest = self.trainer.version;
        let w = &mut self.workers[wi];
        let got = match w.node.checkpoints.contains_key(&version) {
            true => version,
            false => {
                let me = w.node.address();
                match w.node.client.download_from(&mut self.net.link(me), version, newest, self.clock_ms) {
                    Ok((v, bytes)) => {
                        w.node.remember(v, &bytes)?;
                        v
                    }
                    Err(_) => return Ok(None),
                }
            }
        };
        let sub = w.submissions;
        w.submissions += 1;
        let policy = &w.node.checkpoints[&got];
        let file = make_file(policy, w.attack, self.dataset, &w.node.key, step, sub, got, &self.vcfg)?;
        Ok(Some((file.file_id(), format::encode_rollout_file(&file))))
    }

    /// Validator `vi` judges one upload.
    fn judge(&mut self, vi: usize, file_id: &str, text: &str) -> Result<(Option<RolloutFile>, Verdict)> {
        let file = match parse_upload(text, file_id) {
            Ok(f) => f,
            Err(v) => return Ok((None, v)),
        };
        let latest = self.trainer.version;
        let v = &mut self.validators[vi];
        let claimed: BTreeSet<u64> = file.records.iter().map(|r| r.checkpoint_version).collect();
        for c in claimed {
            if c <= latest && !v.checkpoints.contains_key(&c) {
                let me = v.address();
                if let Ok(bytes) = v.client.download(&mut self.net.link(me), c, self.clock_ms) {
                    v.remember(c, &bytes)?;
                }
            }
        }
        let verdict = validate_file(&file, self.dataset, &v.checkpoints, &self.vcfg);
        Ok((Some(file), verdict))
    }

    fn liveness(&self, step: u64, what: &str) -> Error {
        let last = self.out.verdicts.iter().rev().find(|v| !v.is_accept());
        let why = last.map(|v| format!("; last rejection: {}", format::verdict_line(v).trim_end())).unwrap_or_default();
        Error::Liveness(format!("step {step}: {what}{why}"))
    }

    /// Runs `cfg.run.steps` optimizer steps.
    pub fn run(&mut self) -> Result<SimOutcome> {
        self.join_all()?;
        self.publish(0)?;
        let (k, p, g) = (self.cfg.run.async_level, self.cfg.train.prompts_per_step, self.cfg.train.group_size);
        for _ in 0..self.cfg.run.steps {
            let step = self.step_ledger.step_counter();
            self.tick(step)?;
            let version = rollout_version(step, k);
            let mut collector = BatchCollector::new(step, p, self.cfg.train.max_staleness);
            let (mut files, mut rejected) = (0usize, 0usize);
            while !collector.is_ready() {
                if files as u64 >= self.cfg.run.max_submissions_per_step {
                    return Err(self.liveness(step, &format!("no full batch after {files} files")));
                }
                let Some(wi) = self.pick_worker() else {
                    return Err(self.liveness(step, "no active worker"));
                };
                files += 1;
                let Some((file_id, text)) = self.produce(wi, step, version)? else { continue };
                let Some(vi) = self.pick_validator() else {
                    return Err(self.liveness(step, "no active validator"));
                };
                let (file, verdict) = self.judge(vi, &file_id, &text)?;
                let author = self.workers[wi].node.address();
                self.orch.record_verdict(&author, verdict.clone())?;
                self.out.verdicts.push(verdict.clone());
                match file {
                    Some(file) if verdict.is_accept() => {
                        let taken = offer_file(&mut collector, &file, self.dataset, &self.task_index, g);
                        self.step_ledger.record_accepted(step, taken);
                    }
                    _ => {
                        rejected += 1;
                        self.out.slashed.push(author);
                        self.sync_allowlist();
                    }
                }
            }
            let out = consume_step(&mut self.trainer, &mut self.step_ledger, collector, version, files, rejected)?;
            self.out.steps.push(out.summary);
            self.out.consumed.extend(out.consumed);
            self.out.metrics.extend(out.metrics);
            self.publish(self.trainer.version)?;
        }
        self.out.ledger_valid = self.orch.ledger().verify().is_ok();
        self.out.final_params = Some(self.trainer.params().clone());
        self.out.throttled_requests = self.net.throttled.iter().sum();
        self.out.corrupt_shards_served = self.net.corrupt_served;
        let mut out = std::mem::take(&mut self.out);
        out.slashed.sort();
        out.slashed.dedup();
        Ok(out)
    }
}

/// Runs a simulation; returns the outcome and the final orchestrator state.
pub fn run_sim(cfg: &RunConfig, setup: &Setup, faults: Faults) -> Result<(SimOutcome, Orchestrator)> {
    let mut sim = Sim::new(cfg, setup, faults)?;
    let out = sim.run()?;
    Ok((out, sim.orch))
}

/// Writes a run's artifacts into `dir`.
pub fn write_outputs(dir: &Path, cfg: &RunConfig, out: &SimOutcome, orch: Option<&Orchestrator>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    write_atomic(&dir.join("metrics.csv"), out.metrics_csv().as_bytes())?;
    write_atomic(&dir.join("steps.csv"), out.steps_csv().as_bytes())?;
    write_atomic(&dir.join("consumed.log"), out.consumed_log().as_bytes())?;
    let verdicts: String = out.verdicts.iter().map(format::verdict_line).collect();
    write_atomic(&dir.join("verdicts.log"), verdicts.as_bytes())?;
    if let Some(o) = orch {
        let ledger: String = o.ledger().events().iter().map(format::ledger_line).collect();
        write_atomic(&dir.join("ledger.log"), ledger.as_bytes())?;
    }
    if let Some(p) = &out.final_params {
        write_atomic(&dir.join("final.params"), &p.to_bytes())?;
    }
    Ok(())
}
