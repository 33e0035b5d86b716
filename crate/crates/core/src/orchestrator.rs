//! Coordination state machine: discovery, signed pool invites, heartbeat
//! liveness, pull-based task assignment, slashing and the ledger.
//!
//! Time is a millisecond counter supplied by the caller.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::crypto::{Address, Keypair, SignatureBytes};
use crate::error::{Error, Result};
use crate::ledger::{EventKind, Ledger};
use crate::validate::Verdict;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeState {
    Discovered,
    Invited,
    Active,
    Dead,
    Slashed,
}

impl NodeState {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeState::Discovered => "discovered",
            NodeState::Invited => "invited",
            NodeState::Active => "active",
            NodeState::Dead => "dead",
            NodeState::Slashed => "slashed",
        }
    }

    /// Allowed edges of the lifecycle. Invited nodes that go silent may die,
    /// and any pool member may be slashed.
    pub fn can_become(self, next: NodeState) -> bool {
        use NodeState::*;
        matches!(
            (self, next),
            (Discovered, Invited)
                | (Invited, Active)
                | (Invited, Dead)
                | (Active, Dead)
                | (Invited, Slashed)
                | (Active, Slashed)
                | (Dead, Slashed)
                | (Dead, Discovered)
        )
    }
}

impl fmt::Display for NodeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskKind {
    RolloutWorker,
    Validator,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::RolloutWorker => "rollout-worker",
            TaskKind::Validator => "validator",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [TaskKind::RolloutWorker, TaskKind::Validator].into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskStatus {
    Pending,
    Running,
    Failed,
    Done,
}

impl TaskStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskStatus::Pending => "pending",
            TaskStatus::Running => "running",
            TaskStatus::Failed => "failed",
            TaskStatus::Done => "done",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub id: u64,
    pub kind: TaskKind,
    pub config: String,
    /// Restricts the task to one node when set.
    pub target: Option<Address>,
    pub assigned: Option<Address>,
    pub status: TaskStatus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub address: Address,
    pub endpoint: String,
    pub hardware: String,
    pub state: NodeState,
    pub missed_heartbeats: u32,
    pub last_heartbeat_ms: u64,
    pub current_task: Option<u64>,
    pub restart_pending: bool,
}

/// Pool membership offer, signed by the pool owner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Invite {
    pub node: Address,
    pub pool_id: u64,
    pub domain_id: u64,
    pub signature: SignatureBytes,
}

impl Invite {
    pub fn signing_bytes(node: &Address, pool_id: u64, domain_id: u64) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 32 + 16);
        out.extend_from_slice(b"invite");
        out.extend_from_slice(&node.0);
        out.extend_from_slice(&pool_id.to_le_bytes());
        out.extend_from_slice(&domain_id.to_le_bytes());
        out
    }

    pub fn new(owner: &Keypair, node: Address, pool_id: u64, domain_id: u64) -> Self {
        let signature = owner.sign(&Self::signing_bytes(&node, pool_id, domain_id));
        Self { node, pool_id, domain_id, signature }
    }

    /// Node-side acceptance test: addressed to `me`, for the pool the node
    /// expects, and signed by the pool owner.
    pub fn verify(&self, owner: &Address, me: &Address, pool_id: u64) -> Result<()> {
        if &self.node != me || self.pool_id != pool_id {
            return Err(Error::Protocol("invite is for another node or pool".into()));
        }
        owner.verify(&Self::signing_bytes(&self.node, self.pool_id, self.domain_id), &self.signature)
    }
}

/// What a node reports with each heartbeat.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeStatus {
    pub busy: bool,
    /// Task the node finished since its last heartbeat, and whether it succeeded.
    pub finished: Option<(u64, bool)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HeartbeatReply {
    pub task: Option<TaskSpec>,
    pub restart: bool,
}

/// Observable changes, in order, for the event stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    NodeState { node: Address, state: NodeState },
    TaskAssigned { task: u64, node: Address },
    TaskStatus { task: u64, status: TaskStatus },
    Verdict { node: Address, verdict: Verdict },
    Restart { node: Address },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrchestratorConfig {
    pub pool_id: u64,
    pub domain_id: u64,
    pub heartbeat_interval_ms: u64,
    /// Consecutive missed intervals after which a node is dead.
    pub max_missed: u32,
    /// Lines of node logs kept per node.
    pub log_lines: usize,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self { pool_id: 1, domain_id: 1, heartbeat_interval_ms: 2000, max_missed: 3, log_lines: 200 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SweepOutcome {
    pub died: Vec<Address>,
    pub invites: Vec<Invite>,
}

#[derive(Debug, Clone)]
pub struct Orchestrator {
    pub cfg: OrchestratorConfig,
    owner: Keypair,
    nodes: BTreeMap<Address, NodeRecord>,
    tasks: BTreeMap<u64, TaskSpec>,
    next_task: u64,
    ledger: Ledger,
    events: Vec<Event>,
    logs: BTreeMap<Address, VecDeque<String>>,
}

impl Orchestrator {
    pub fn new(owner: Keypair, cfg: OrchestratorConfig) -> Self {
        Self {
            cfg,
            owner,
            nodes: BTreeMap::new(),
            tasks: BTreeMap::new(),
            next_task: 0,
            ledger: Ledger::new(),
            events: Vec::new(),
            logs: BTreeMap::new(),
        }
    }

    pub fn owner(&self) -> Address {
        self.owner.address()
    }

    pub fn node(&self, address: &Address) -> Option<&NodeRecord> {
        self.nodes.get(address)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values()
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.values()
    }

    pub fn task(&self, id: u64) -> Option<&TaskSpec> {
        self.tasks.get(&id)
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    /// Every event so far; callers remember how many they have seen.
    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Nodes allowed to fetch checkpoints.
    pub fn allowlist(&self) -> BTreeSet<Address> {
        self.nodes.values().filter(|n| n.state == NodeState::Active).map(|n| n.address).collect()
    }

    fn set_state(&mut self, address: &Address, state: NodeState) {
        if let Some(n) = self.nodes.get_mut(address) {
            debug_assert!(n.state.can_become(state), "{} -> {}", n.state, state);
            n.state = state;
            self.events.push(Event::NodeState { node: *address, state });
        }
    }

    /// Discovery: stores metadata for a new node or a dead node coming back.
    pub fn register(&mut self, address: Address, endpoint: &str, hardware: &str, now_ms: u64) -> Result<()> {
        match self.nodes.get(&address).map(|n| n.state) {
            Some(NodeState::Slashed) => return Err(Error::Protocol("node is slashed".into())),
            Some(NodeState::Dead) | None => {}
            Some(s) => return Err(Error::Protocol(format!("node already {s}"))),
        }
        let record = NodeRecord {
            address,
            endpoint: endpoint.into(),
            hardware: hardware.into(),
            state: NodeState::Discovered,
            missed_heartbeats: 0,
            last_heartbeat_ms: now_ms,
            current_task: None,
            restart_pending: false,
        };
        self.nodes.insert(address, record);
        self.events.push(Event::NodeState { node: address, state: NodeState::Discovered });
        let payload = format!("node={} endpoint={endpoint}", address.to_hex());
        self.ledger.append(EventKind::Register, payload, &self.owner);
        Ok(())
    }

    pub fn invite(&mut self, address: &Address, now_ms: u64) -> Result<Invite> {
        let node = self.nodes.get_mut(address).ok_or_else(|| Error::Protocol("unknown node".into()))?;
        if node.state != NodeState::Discovered {
            return Err(Error::Protocol(format!("cannot invite a {} node", node.state)));
        }
        node.last_heartbeat_ms = now_ms;
        node.missed_heartbeats = 0;
        self.set_state(address, NodeState::Invited);
        Ok(Invite::new(&self.owner, *address, self.cfg.pool_id, self.cfg.domain_id))
    }

    /// The node presents the invite it accepted; it joins the pool.
    pub fn accept_invite(&mut self, invite: &Invite, now_ms: u64) -> Result<()> {
        invite.verify(&self.owner.address(), &invite.node, self.cfg.pool_id)?;
        let node = self.nodes.get_mut(&invite.node).ok_or_else(|| Error::Protocol("unknown node".into()))?;
        if node.state != NodeState::Invited {
            return Err(Error::Protocol(format!("invite presented by a {} node", node.state)));
        }
        node.last_heartbeat_ms = now_ms;
        node.missed_heartbeats = 0;
        self.set_state(&invite.node, NodeState::Active);
        let payload = format!("node={} pool={} domain={}", invite.node.to_hex(), invite.pool_id, invite.domain_id);
        self.ledger.append(EventKind::InviteAccept, payload, &self.owner);
        Ok(())
    }

    /// Records liveness; hands an idle node its next matching task.
    pub fn heartbeat(&mut self, address: &Address, status: &NodeStatus, now_ms: u64) -> Result<HeartbeatReply> {
        let node = self.nodes.get_mut(address).ok_or_else(|| Error::Protocol("unknown node".into()))?;
        match node.state {
            NodeState::Active | NodeState::Invited => {}
            NodeState::Dead => return Err(Error::Protocol("node is dead; re-register".into())),
            s => return Err(Error::Protocol(format!("heartbeat from a {s} node"))),
        }
        node.last_heartbeat_ms = now_ms;
        node.missed_heartbeats = 0;
        let active = node.state == NodeState::Active;
        let restart = core::mem::take(&mut node.restart_pending);
        if let Some((id, ok)) = status.finished {
            if node.current_task == Some(id) {
                node.current_task = None;
                let st = if ok { TaskStatus::Done } else { TaskStatus::Failed };
                if let Some(t) = self.tasks.get_mut(&id) {
                    t.status = st;
                }
                self.events.push(Event::TaskStatus { task: id, status: st });
            }
        }
        let mut reply = HeartbeatReply { task: None, restart };
        let node = &self.nodes[address];
        if active && !status.busy && node.current_task.is_none() {
            let pick = self
                .tasks
                .values()
                .find(|t| t.status == TaskStatus::Pending && t.target.is_none_or(|a| a == *address))
                .map(|t| t.id);
            if let Some(id) = pick {
                let t = self.tasks.get_mut(&id).unwrap();
                t.status = TaskStatus::Running;
                t.assigned = Some(*address);
                reply.task = Some(t.clone());
                self.nodes.get_mut(address).unwrap().current_task = Some(id);
                self.events.push(Event::TaskAssigned { task: id, node: *address });
            }
        }
        Ok(reply)
    }

    /// One liveness sweep at `now_ms`, meant to run every heartbeat interval.
    /// Pool members without a heartbeat in the last interval accrue a miss;
    /// `max_missed` consecutive misses mark them dead. Discovered nodes are
    /// invited.
    pub fn sweep(&mut self, now_ms: u64) -> SweepOutcome {
        let interval = self.cfg.heartbeat_interval_ms;
        let mut out = SweepOutcome::default();
        let members: Vec<Address> = self
            .nodes
            .values()
            .filter(|n| matches!(n.state, NodeState::Active | NodeState::Invited))
            .map(|n| n.address)
            .collect();
        for a in members {
            let node = self.nodes.get_mut(&a).unwrap();
            if node.last_heartbeat_ms + interval <= now_ms {
                node.missed_heartbeats += 1;
            }
            if node.missed_heartbeats >= self.cfg.max_missed {
                let task = node.current_task.take();
                self.set_state(&a, NodeState::Dead);
                if let Some(id) = task {
                    self.requeue(id);
                }
                out.died.push(a);
            }
        }
        let discovered: Vec<Address> =
            self.nodes.values().filter(|n| n.state == NodeState::Discovered).map(|n| n.address).collect();
        for a in discovered {
            if let Ok(inv) = self.invite(&a, now_ms) {
                out.invites.push(inv);
            }
        }
        out
    }

    fn requeue(&mut self, id: u64) {
        if let Some(t) = self.tasks.get_mut(&id) {
            t.status = TaskStatus::Pending;
            t.assigned = None;
            self.events.push(Event::TaskStatus { task: id, status: TaskStatus::Pending });
        }
    }

    pub fn slash(&mut self, address: &Address, reason: &str) -> Result<()> {
        let state = self.nodes.get(address).map(|n| n.state).ok_or_else(|| Error::Protocol("unknown node".into()))?;
        if state == NodeState::Slashed {
            return Ok(());
        }
        if !state.can_become(NodeState::Slashed) {
            return Err(Error::Protocol(format!("cannot slash a {state} node")));
        }
        let task = self.nodes.get_mut(address).unwrap().current_task.take();
        self.set_state(address, NodeState::Slashed);
        if let Some(id) = task {
            self.requeue(id);
        }
        self.ledger.append(EventKind::Slash, format!("node={} reason={reason}", address.to_hex()), &self.owner);
        Ok(())
    }

    /// Accepted files earn a contribution entry; rejections slash the author.
    pub fn record_verdict(&mut self, node: &Address, verdict: Verdict) -> Result<()> {
        if !self.nodes.contains_key(node) {
            return Err(Error::Protocol("verdict for unknown node".into()));
        }
        match verdict.failed_check {
            None => {
                let payload = format!("node={} file={}", node.to_hex(), verdict.file_id);
                self.ledger.append(EventKind::Contribution, payload, &self.owner);
            }
            Some(check) => self.slash(node, &format!("{check}:{}", verdict.file_id))?,
        }
        self.events.push(Event::Verdict { node: *node, verdict });
        Ok(())
    }

    pub fn create_task(&mut self, kind: TaskKind, config: &str, target: Option<Address>) -> u64 {
        let id = self.next_task;
        self.next_task += 1;
        self.tasks.insert(id, TaskSpec { id, kind, config: config.into(), target, assigned: None, status: TaskStatus::Pending });
        self.events.push(Event::TaskStatus { task: id, status: TaskStatus::Pending });
        id
    }

    /// Flags the node's workload for restart; delivered with its next heartbeat.
    pub fn restart(&mut self, address: &Address) -> Result<()> {
        let node = self.nodes.get_mut(address).ok_or_else(|| Error::Protocol("unknown node".into()))?;
        if node.state != NodeState::Active {
            return Err(Error::Protocol(format!("cannot restart a {} node", node.state)));
        }
        node.restart_pending = true;
        self.events.push(Event::Restart { node: *address });
        Ok(())
    }

    pub fn push_log(&mut self, address: &Address, line: &str) {
        let keep = self.cfg.log_lines;
        let buf = self.logs.entry(*address).or_default();
        buf.push_back(line.into());
        while buf.len() > keep {
            buf.pop_front();
        }
    }

    pub fn logs(&self, address: &Address) -> Vec<String> {
        self.logs.get(address).map(|b| b.iter().cloned().collect()).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::validate::FailedCheck;

    const I: u64 = 2000;

    fn pool() -> (Orchestrator, Address) {
        let mut o = Orchestrator::new(Keypair::derive("owner", 0), OrchestratorConfig::default());
        let a = Keypair::derive("node", 1).address();
        o.register(a, "http://n1", "cpu", 0).unwrap();
        let inv = o.invite(&a, 0).unwrap();
        o.accept_invite(&inv, 0).unwrap();
        (o, a)
    }

    #[test]
    fn invite_signature_binds_node_and_pool() {
        let owner = Keypair::derive("owner", 0);
        let me = Keypair::derive("node", 1).address();
        let inv = Invite::new(&owner, me, 7, 1);
        assert!(inv.verify(&owner.address(), &me, 7).is_ok());
        assert!(inv.verify(&owner.address(), &me, 8).is_err());
        let mut forged = inv.clone();
        forged.pool_id = 8;
        assert!(forged.verify(&owner.address(), &me, 8).is_err());
        assert!(inv.verify(&Keypair::derive("other", 0).address(), &me, 7).is_err());
    }

    #[test]
    fn lifecycle_and_ledger() {
        let (o, a) = pool();
        assert_eq!(o.node(&a).unwrap().state, NodeState::Active);
        let kinds: Vec<_> = o.ledger().events().iter().map(|e| e.kind).collect();
        assert_eq!(kinds, [EventKind::Register, EventKind::InviteAccept]);
        assert!(o.ledger().verify().is_ok());
        assert!(o.allowlist().contains(&a));
    }

    #[test]
    fn death_after_exactly_m_missed_sweeps() {
        let (mut o, a) = pool();
        o.heartbeat(&a, &NodeStatus::default(), 100).unwrap();
        for k in 1..=2 {
            let out = o.sweep(100 + k * I);
            assert!(out.died.is_empty());
            assert_eq!(o.node(&a).unwrap().missed_heartbeats, k as u32);
        }
        let out = o.sweep(100 + 3 * I);
        assert_eq!(out.died, [a]);
        assert_eq!(o.node(&a).unwrap().state, NodeState::Dead);
        assert!(!o.allowlist().contains(&a));
        assert!(o.heartbeat(&a, &NodeStatus::default(), 100 + 3 * I).is_err());
    }

    #[test]
    fn heartbeat_resets_missed_counter() {
        let (mut o, a) = pool();
        o.sweep(I);
        o.sweep(2 * I);
        assert_eq!(o.node(&a).unwrap().missed_heartbeats, 2);
        o.heartbeat(&a, &NodeStatus::default(), 2 * I + 5).unwrap();
        assert_eq!(o.node(&a).unwrap().missed_heartbeats, 0);
        o.sweep(3 * I);
        assert_eq!(o.node(&a).unwrap().state, NodeState::Active);
    }

    #[test]
    fn dead_node_reregisters_and_is_reinvited() {
        let (mut o, a) = pool();
        for k in 1..=3 {
            o.sweep(k * I);
        }
        assert_eq!(o.node(&a).unwrap().state, NodeState::Dead);
        o.register(a, "http://n1", "cpu", 3 * I + 10).unwrap();
        let out = o.sweep(4 * I);
        assert_eq!(out.invites.len(), 1);
        o.accept_invite(&out.invites[0], 4 * I + 1).unwrap();
        assert_eq!(o.node(&a).unwrap().state, NodeState::Active);
    }

    #[test]
    fn pull_based_assignment() {
        let (mut o, a) = pool();
        let id = o.create_task(TaskKind::RolloutWorker, "seed=1", None);
        let busy = o.heartbeat(&a, &NodeStatus { busy: true, finished: None }, 10).unwrap();
        assert!(busy.task.is_none());
        let idle = o.heartbeat(&a, &NodeStatus::default(), 20).unwrap();
        assert_eq!(idle.task.unwrap().id, id);
        assert_eq!(o.task(id).unwrap().status, TaskStatus::Running);
        let again = o.heartbeat(&a, &NodeStatus::default(), 30).unwrap();
        assert!(again.task.is_none());
        o.heartbeat(&a, &NodeStatus { busy: false, finished: Some((id, true)) }, 40).unwrap();
        assert_eq!(o.task(id).unwrap().status, TaskStatus::Done);
    }

    #[test]
    fn slash_is_final() {
        let (mut o, a) = pool();
        let owner = Keypair::derive("owner", 0);
        let v = Verdict::reject("f", FailedCheck::Seed, "x");
        o.record_verdict(&a, v).unwrap();
        assert_eq!(o.node(&a).unwrap().state, NodeState::Slashed);
        assert!(!o.allowlist().contains(&a));
        assert!(o.heartbeat(&a, &NodeStatus::default(), 5).is_err());
        assert!(o.register(a, "x", "y", 6).is_err());
        let replay = Invite::new(&owner, a, 1, 1);
        assert!(o.accept_invite(&replay, 7).is_err());
        assert_eq!(o.ledger().events().last().unwrap().kind, EventKind::Slash);
        assert!(o.ledger().verify().is_ok());
    }

    #[test]
    fn restart_is_delivered_once() {
        let (mut o, a) = pool();
        o.restart(&a).unwrap();
        assert!(o.heartbeat(&a, &NodeStatus::default(), 1).unwrap().restart);
        assert!(!o.heartbeat(&a, &NodeStatus::default(), 2).unwrap().restart);
    }

    #[test]
    fn task_of_dead_node_returns_to_pending() {
        let (mut o, a) = pool();
        let id = o.create_task(TaskKind::Validator, "", None);
        o.heartbeat(&a, &NodeStatus::default(), 0).unwrap();
        for k in 1..=3 {
            o.sweep(k * I);
        }
        assert_eq!(o.task(id).unwrap().status, TaskStatus::Pending);
        assert_eq!(o.task(id).unwrap().assigned, None);
    }
}
