//! JSON bodies of the HTTP APIs.

use serde::{Deserialize, Serialize};
use swarm_core::crypto::{hex_decode, hex_encode, Address, Keypair};
use swarm_core::orchestrator::{Event, Invite, NodeRecord, TaskKind, TaskSpec, TaskStatus};
use swarm_core::trainer::TrainMetrics;
use swarm_core::validate::{FailedCheck, Verdict};

use crate::error::{parse_err, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    RolloutWorker,
    Validator,
    Trainer,
    Relay,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub role: Role,
    pub endpoint: String,
    pub hardware: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct HeartbeatRequest {
    pub busy: bool,
    /// Finished task id and whether it succeeded.
    pub finished: Option<(u64, bool)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartbeatResponse {
    pub task: Option<TaskDto>,
    pub restart: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InviteDto {
    pub node: String,
    pub pool_id: u64,
    pub domain_id: u64,
    pub signature: String,
}

impl From<&Invite> for InviteDto {
    fn from(i: &Invite) -> Self {
        Self { node: i.node.to_hex(), pool_id: i.pool_id, domain_id: i.domain_id, signature: hex_encode(&i.signature) }
    }
}

impl InviteDto {
    pub fn to_invite(&self) -> Result<Invite> {
        Ok(Invite {
            node: parse_address(&self.node)?,
            pool_id: self.pool_id,
            domain_id: self.domain_id,
            signature: hex_decode::<64>(&self.signature).map_err(|_| parse_err("bad invite signature"))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDto {
    pub address: String,
    pub endpoint: String,
    pub hardware: String,
    pub role: Option<Role>,
    pub state: String,
    pub missed_heartbeats: u32,
    pub last_heartbeat_ms: u64,
    pub current_task: Option<u64>,
}

impl NodeDto {
    pub fn new(n: &NodeRecord, role: Option<Role>) -> Self {
        Self {
            address: n.address.to_hex(),
            endpoint: n.endpoint.clone(),
            hardware: n.hardware.clone(),
            role,
            state: n.state.as_str().into(),
            missed_heartbeats: n.missed_heartbeats,
            last_heartbeat_ms: n.last_heartbeat_ms,
            current_task: n.current_task,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDto {
    pub id: u64,
    pub kind: String,
    pub config: String,
    pub target: Option<String>,
    pub assigned: Option<String>,
    pub status: String,
}

impl From<&TaskSpec> for TaskDto {
    fn from(t: &TaskSpec) -> Self {
        Self {
            id: t.id,
            kind: t.kind.as_str().into(),
            config: t.config.clone(),
            target: t.target.map(|a| a.to_hex()),
            assigned: t.assigned.map(|a| a.to_hex()),
            status: t.status.as_str().into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateTask {
    pub kind: String,
    #[serde(default)]
    pub config: String,
    #[serde(default)]
    pub target: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreatedTask {
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictDto {
    /// Author of the judged file.
    pub node: String,
    pub file_id: String,
    pub result: String,
    pub failed_check: Option<String>,
    pub details: String,
}

impl VerdictDto {
    pub fn new(node: &Address, v: &Verdict) -> Self {
        Self {
            node: node.to_hex(),
            file_id: v.file_id.clone(),
            result: if v.is_accept() { "accept" } else { "reject" }.into(),
            failed_check: v.failed_check.map(|c| c.as_str().into()),
            details: v.details.clone(),
        }
    }

    pub fn to_verdict(&self) -> Result<(Address, Verdict)> {
        let node = parse_address(&self.node)?;
        let v = match (self.result.as_str(), &self.failed_check) {
            ("accept", None) => Verdict::accept(self.file_id.clone()),
            ("reject", Some(c)) => {
                let c = FailedCheck::parse(c).ok_or_else(|| parse_err(format!("unknown check {c:?}")))?;
                Verdict::reject(self.file_id.clone(), c, self.details.clone())
            }
            _ => return Err(parse_err("inconsistent verdict")),
        };
        Ok((node, v))
    }
}

/// One item of the `/events` stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventDto {
    NodeState { seq: u64, node: String, state: String },
    TaskAssigned { seq: u64, task: u64, node: String },
    TaskStatus { seq: u64, task: u64, status: String },
    Verdict { seq: u64, node: String, file_id: String, result: String, failed_check: Option<String> },
    Restart { seq: u64, node: String },
}

impl EventDto {
    pub fn new(seq: u64, e: &Event) -> Self {
        match e {
            Event::NodeState { node, state } => Self::NodeState { seq, node: node.to_hex(), state: state.as_str().into() },
            Event::TaskAssigned { task, node } => Self::TaskAssigned { seq, task: *task, node: node.to_hex() },
            Event::TaskStatus { task, status } => Self::TaskStatus { seq, task: *task, status: status.as_str().into() },
            Event::Verdict { node, verdict } => Self::Verdict {
                seq,
                node: node.to_hex(),
                file_id: verdict.file_id.clone(),
                result: if verdict.is_accept() { "accept" } else { "reject" }.into(),
                failed_check: verdict.failed_check.map(|c| c.as_str().into()),
            },
            Event::Restart { node } => Self::Restart { seq, node: node.to_hex() },
        }
    }

    pub fn seq(&self) -> u64 {
        match self {
            Self::NodeState { seq, .. }
            | Self::TaskAssigned { seq, .. }
            | Self::TaskStatus { seq, .. }
            | Self::Verdict { seq, .. }
            | Self::Restart { seq, .. } => *seq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepDto {
    pub step: u64,
    /// Latest published checkpoint version.
    pub version: u64,
    /// Submission index the trainer is waiting on in the current step.
    #[serde(default)]
    pub scanning: u64,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsDto {
    pub step: u64,
    pub micro_step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    pub kl: f64,
    pub mean_task_reward: f64,
    pub mean_length_penalty: f64,
    pub lr: f64,
}

impl From<&TrainMetrics> for MetricsDto {
    fn from(m: &TrainMetrics) -> Self {
        Self {
            step: m.step,
            micro_step: m.micro_step,
            loss: m.loss,
            grad_norm: m.grad_norm,
            clip_fraction: m.clip_fraction,
            entropy: m.entropy,
            kl: m.kl,
            mean_task_reward: m.mean_task_reward,
            mean_length_penalty: m.mean_length_penalty,
            lr: m.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatestDto {
    pub version: Option<u64>,
}

/// Allowlist pushed by the pool owner to every relay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllowlistDto {
    pub addresses: Vec<String>,
    /// Monotone counter; relays ignore older lists.
    pub epoch: u64,
    pub signature: String,
}

impl AllowlistDto {
    fn message(addresses: &[String], epoch: u64) -> Vec<u8> {
        format!("allowlist {epoch} {}", addresses.join(",")).into_bytes()
    }

    pub fn signed(addresses: impl IntoIterator<Item = Address>, epoch: u64, owner: &Keypair) -> Self {
        let addresses: Vec<String> = addresses.into_iter().map(|a| a.to_hex()).collect();
        let signature = hex_encode(&owner.sign(&Self::message(&addresses, epoch)));
        Self { addresses, epoch, signature }
    }

    pub fn verify(&self, owner: &Address) -> Result<Vec<Address>> {
        let sig = hex_decode::<64>(&self.signature).map_err(|_| parse_err("bad allowlist signature"))?;
        owner.verify(&Self::message(&self.addresses, self.epoch), &sig).map_err(|_| parse_err("allowlist not signed by owner"))?;
        self.addresses.iter().map(|a| parse_address(a)).collect()
    }
}

pub fn parse_address(s: &str) -> Result<Address> {
    Address::from_hex(s).map_err(|_| parse_err(format!("bad address {s:?}")))
}

pub fn parse_task_kind(s: &str) -> Result<TaskKind> {
    TaskKind::parse(s).ok_or_else(|| parse_err(format!("unknown task kind {s:?}")))
}

pub fn task_status_done(s: TaskStatus) -> bool {
    matches!(s, TaskStatus::Done | TaskStatus::Failed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allowlist_signature_covers_epoch_and_members() {
        let owner = Keypair::derive("owner", 0);
        let a = Keypair::derive("a", 0).address();
        let list = AllowlistDto::signed([a], 3, &owner);
        assert_eq!(list.verify(&owner.address()).unwrap(), vec![a]);
        let mut replay = list.clone();
        replay.epoch = 4;
        assert!(replay.verify(&owner.address()).is_err());
        let mut widened = list;
        widened.addresses.push(Keypair::derive("b", 0).address().to_hex());
        assert!(widened.verify(&owner.address()).is_err());
    }

    #[test]
    fn verdict_round_trips() {
        let node = Keypair::derive("w", 0).address();
        for v in [Verdict::accept("f"), Verdict::reject("g", FailedCheck::Sampling, "too many low tokens")] {
            let dto = VerdictDto::new(&node, &v);
            let json = serde_json::to_string(&dto).unwrap();
            let back: VerdictDto = serde_json::from_str(&json).unwrap();
            assert_eq!(back.to_verdict().unwrap(), (node, v));
        }
    }
}
