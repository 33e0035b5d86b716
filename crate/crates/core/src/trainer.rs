//! The trusted trainer: step accounting, online-filtered batch assembly,
//! staleness discipline, and micro-stepped GRPO updates.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grad::{gradient, sgd_step, SequenceSample};
use crate::grpo::{KlReference, OldLogProbMode, TrainConfig};
use crate::model::{sequence_logprobs, Policy, PolicyParams, TokenId};
use crate::rollout::RolloutRecord;

/// Oldest checkpoint lag a rollout may carry and still be trained on.
pub const DEFAULT_MAX_STALENESS: u64 = 5;

/// Checkpoint version rollouts for `step` are generated under at asynchrony
/// level `k`. Step `s` trains from version `s` and publishes `s + 1`, so
/// `k = 0` is fully on-policy.
pub fn rollout_version(step: u64, k: u64) -> u64 {
    step.saturating_sub(k)
}

/// One prompt's group as the trainer consumes it.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub prompt_id: u64,
    pub prompt: Vec<TokenId>,
    pub completions: Vec<Vec<TokenId>>,
    pub rewards: Vec<f64>,
    pub task_rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub checkpoint_version: u64,
}

impl GroupBatch {
    pub fn from_records(prompt: &[TokenId], records: &[RolloutRecord]) -> Self {
        Self {
            prompt_id: records.first().map_or(0, |r| r.task_id),
            prompt: prompt.to_vec(),
            completions: records.iter().map(|r| r.output_tokens.clone()).collect(),
            rewards: records.iter().map(|r| r.r_total).collect(),
            task_rewards: records.iter().map(|r| r.r_task).collect(),
            advantages: records.iter().map(|r| r.advantage).collect(),
            checkpoint_version: records.iter().map(|r| r.checkpoint_version).min().unwrap_or(0),
        }
    }

    /// All rewards equal, hence all advantages zero: no policy signal.
    pub fn is_degenerate(&self) -> bool {
        self.rewards.windows(2).all(|w| w[0] == w[1])
    }
}

/// Outcome of offering a group to a [`BatchCollector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Offer {
    Taken,
    Degenerate,
    Stale,
    Full,
}

/// Accumulates non-degenerate, fresh groups for one step in arrival order.
#[derive(Debug, Clone)]
pub struct BatchCollector {
    pub step: u64,
    pub required: usize,
    pub max_staleness: u64,
    groups: Vec<GroupBatch>,
    pub discarded_degenerate: usize,
    pub discarded_stale: usize,
}

impl BatchCollector {
    pub fn new(step: u64, required: usize, max_staleness: u64) -> Self {
        Self { step, required, max_staleness, groups: Vec::new(), discarded_degenerate: 0, discarded_stale: 0 }
    }

    pub fn offer(&mut self, group: GroupBatch) -> Offer {
        if self.is_ready() {
            return Offer::Full;
        }
        if group.checkpoint_version + self.max_staleness < self.step {
            self.discarded_stale += 1;
            return Offer::Stale;
        }
        if group.is_degenerate() {
            self.discarded_degenerate += 1;
            return Offer::Degenerate;
        }
        self.groups.push(group);
        Offer::Taken
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn is_ready(&self) -> bool {
        self.groups.len() >= self.required
    }

    /// The batch, once `required` groups have been taken.
    pub fn take(&mut self) -> Option<Vec<GroupBatch>> {
        self.is_ready().then(|| core::mem::take(&mut self.groups))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepEntry {
    pub required: usize,
    pub accepted: usize,
    pub consumed: bool,
}

/// Per-step accounting behind the step-counter endpoint.
#[derive(Debug, Clone, Default)]
pub struct StepLedger {
    required: usize,
    steps: BTreeMap<u64, StepEntry>,
    /// Lower bound on the counter; only ever increases.
    floor: u64,
}

impl StepLedger {
    pub fn new(required: usize) -> Self {
        Self { required, steps: BTreeMap::new(), floor: 0 }
    }

    pub fn entry(&self, step: u64) -> StepEntry {
        self.steps.get(&step).copied().unwrap_or(StepEntry { required: self.required, ..Default::default() })
    }

    /// Smallest step whose accepted-group count is below its requirement.
    pub fn step_counter(&self) -> u64 {
        let mut s = self.floor;
        loop {
            let e = self.entry(s);
            if !e.consumed && e.accepted < e.required {
                return s;
            }
            s += 1;
        }
    }

    pub fn record_accepted(&mut self, step: u64, groups: usize) {
        let required = self.required;
        let e = self.steps.entry(step).or_insert(StepEntry { required, ..Default::default() });
        e.accepted = (e.accepted + groups).min(e.required);
        self.advance();
    }

    pub fn mark_consumed(&mut self, step: u64) {
        let required = self.required;
        let e = self.steps.entry(step).or_insert(StepEntry { required, ..Default::default() });
        e.consumed = true;
        self.advance();
    }

    fn advance(&mut self) {
        self.floor = self.step_counter();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainMetrics {
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

impl TrainMetrics {
    pub fn is_finite(&self) -> bool {
        [self.loss, self.grad_norm, self.clip_fraction, self.entropy, self.kl, self.mean_task_reward, self.mean_length_penalty]
            .iter()
            .all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub metrics: Vec<TrainMetrics>,
    pub mean_task_reward: f64,
    pub mean_length_penalty: f64,
    pub groups: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// The training loop state. `version` counts completed steps and is the
/// checkpoint version of `policy`.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub policy: Policy,
    pub reference: Policy,
    pub cfg: TrainConfig,
    pub version: u64,
    pub optimizer_steps: u64,
}

impl Trainer {
    pub fn new(initial: PolicyParams, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let policy = Policy::new(initial);
        Ok(Self { reference: policy.clone(), policy, cfg, version: 0, optimizer_steps: 0 })
    }

    pub fn params(&self) -> &PolicyParams {
        self.policy.params()
    }

    fn samples(current: &Policy, groups: &[GroupBatch], reference: &Policy) -> Result<Vec<SequenceSample>> {
        let mut out = Vec::new();
        for g in groups {
            for (c, &adv) in g.completions.iter().zip(&g.advantages) {
                out.push(SequenceSample {
                    prompt: g.prompt.clone(),
                    output: c.clone(),
                    advantage: adv,
                    old_logp: sequence_logprobs(current, &g.prompt, c)?.logprobs,
                    ref_logp: sequence_logprobs(reference, &g.prompt, c)?.logprobs,
                });
            }
        }
        Ok(out)
    }

    /// One rollout step: old log-probs from the policy at the start of the
    /// step, then `micro_steps` clipped SGD updates over equal slices of the
    /// batch. On error the policy is restored to its value at the start of
    /// the step.
    pub fn train_step(&mut self, batch: &[GroupBatch]) -> Result<StepReport> {
        let start = self.policy.clone();
        let opt_start = self.optimizer_steps;
        let out = self.run_step(batch, &start);
        if out.is_err() {
            self.policy = start;
            self.optimizer_steps = opt_start;
        }
        out
    }

    fn run_step(&mut self, batch: &[GroupBatch], start: &Policy) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(crate::error::invalid("empty batch"));
        }
        let step = self.version;
        let reference = match self.cfg.kl_reference {
            KlReference::Initial => &self.reference,
            KlReference::LastCheckpoint => start,
        };
        let slice_len = batch.len().div_ceil(self.cfg.micro_steps);
        let prepared = match self.cfg.old_logp_mode {
            OldLogProbMode::PerStep => Some(Self::samples(start, batch, reference)?),
            OldLogProbMode::PerMicroStep => None,
        };
        let mut metrics = Vec::with_capacity(self.cfg.micro_steps);
        let mut offset = 0;
        for (micro, slice) in batch.chunks(slice_len).enumerate() {
            let samples = match &prepared {
                Some(all) => {
                    let n: usize = slice.iter().map(|g| g.completions.len()).sum();
                    offset += n;
                    all[offset - n..offset].to_vec()
                }
                None => Self::samples(&self.policy, slice, reference)?,
            };
            let out = gradient(&self.policy, &samples, &self.cfg)?;
            let lr = self.cfg.lr_at(self.optimizer_steps);
            let mut params = self.policy.params().clone();
            sgd_step(&mut params, &out.grads, lr)?;
            self.policy = Policy::new(params);
            self.optimizer_steps += 1;
            let m = TrainMetrics {
                step,
                micro_step: micro,
                loss: out.stats.loss,
                grad_norm: out.pre_clip_norm,
                clip_fraction: out.stats.clip_fraction,
                entropy: out.stats.mean_entropy,
                kl: out.stats.mean_kl,
                mean_task_reward: mean_task_reward(slice),
                mean_length_penalty: mean_length_penalty(slice),
                lr,
            };
            if !m.is_finite() {
                return Err(Error::Numeric("metrics"));
            }
            metrics.push(m);
        }
        self.version += 1;
        Ok(StepReport {
            step,
            metrics,
            mean_task_reward: mean_task_reward(batch),
            mean_length_penalty: mean_length_penalty(batch),
            groups: batch.len(),
        })
    }
}

pub fn mean_task_reward(groups: &[GroupBatch]) -> f64 {
    mean(groups.iter().flat_map(|g| g.task_rewards.iter().copied()))
}

pub fn mean_length_penalty(groups: &[GroupBatch]) -> f64 {
    mean(groups.iter().flat_map(|g| g.task_rewards.iter().zip(&g.rewards).map(|(t, r)| t - r)))
}
