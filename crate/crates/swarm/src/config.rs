//! Run configuration, read from TOML. Every section and key is optional;
//! missing values take the toy defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use swarm_core::grpo::{AdvantageMode, KlReference, OldLogProbMode, TrainConfig};
use swarm_core::orchestrator::OrchestratorConfig;
use swarm_core::pretrain::PretrainConfig;
use swarm_core::rollout::RolloutConfig;
use swarm_core::shardcast::{RelayPolicy, SelectionConfig, RETAINED_VERSIONS};
use swarm_core::tasks::toy_model_config;
use swarm_core::validate::ValidatorConfig;
use swarm_core::ModelConfig;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Every role in one process on a logical clock; fully deterministic.
    #[default]
    Sim,
    /// Every role a separate process over loopback HTTP.
    Process,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub steps: u64,
    pub async_level: u64,
    pub mode: Mode,
    /// Gives up on a step after this many submitted files.
    pub max_submissions_per_step: u64,
    /// Wall-clock limit for process-mode runs.
    pub timeout_secs: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, steps: 200, async_level: 2, mode: Mode::Sim, max_submissions_per_step: 400, timeout_secs: 1800 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden_dim: toy_model_config().hidden_dim }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub seed: u64,
    pub tasks: usize,
    pub filter_k: usize,
    pub filter_low: f64,
    pub filter_high: f64,
    pub filter_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { seed: 1, tasks: 256, filter_k: 8, filter_low: 0.125, filter_high: 0.5, filter_seed: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub seed: u64,
    pub steps: usize,
    pub known_fraction: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self { seed: d.seed, steps: d.steps, known_fraction: d.known_fraction }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epsilon: f64,
    /// `inf` disables the upper bound.
    pub delta: f64,
    pub alpha: f64,
    pub kl_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub warmup_steps: u64,
    pub grad_clip: f64,
    pub group_size: usize,
    pub prompts_per_step: usize,
    pub micro_steps: usize,
    pub adv_eps: f64,
    /// `mean_std` or `mean_only`.
    pub adv_mode: String,
    /// `initial` or `last_checkpoint`.
    pub kl_reference: String,
    /// `per_step` or `per_micro_step`.
    pub old_logp_mode: String,
    pub max_staleness: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::toy();
        Self {
            epsilon: t.epsilon,
            delta: t.delta,
            alpha: t.alpha,
            kl_coef: t.kl_coef,
            entropy_coef: t.entropy_coef,
            lr: t.lr,
            warmup_steps: t.warmup_steps,
            grad_clip: t.grad_clip,
            group_size: t.group_size,
            prompts_per_step: t.prompts_per_step,
            micro_steps: t.micro_steps,
            adv_eps: t.adv_eps,
            adv_mode: "mean_std".into(),
            kl_reference: "initial".into(),
            old_logp_mode: "per_step".into(),
            max_staleness: swarm_core::trainer::DEFAULT_MAX_STALENESS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkerSection {
    pub count: usize,
    pub groups_per_file: usize,
    pub temperature: f64,
    /// Attack names, one per dishonest worker, added on top of `count`.
    pub adversarial: Vec<String>,
}

impl Default for WorkerSection {
    fn default() -> Self {
        Self { count: 2, groups_per_file: 4, temperature: 1.0, adversarial: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidatorSection {
    pub count: usize,
    pub p_low: f64,
    pub theta: f64,
    pub min_sampling_len: usize,
    pub eos_threshold: f64,
    pub commitment_rate: f64,
}

impl Default for ValidatorSection {
    fn default() -> Self {
        let v = ValidatorConfig::default();
        Self {
            count: 1,
            p_low: v.p_low,
            theta: v.theta,
            min_sampling_len: v.min_sampling_len,
            eos_threshold: v.eos_threshold,
            commitment_rate: v.commitment_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShardcastSection {
    pub relays: usize,
    pub shard_size: usize,
    pub beta: f64,
    pub p_min: f64,
    pub heal_after_ms: u64,
    pub heal_pull: f64,
    pub rate_per_sec: f64,
    pub burst: f64,
    /// Relay indices that flip a bit in every shard they serve.
    pub corrupt_relays: Vec<usize>,
    /// Relay indices limited to `throttled_rate_per_sec` with a burst of 1.
    pub throttled_relays: Vec<usize>,
    pub throttled_rate_per_sec: f64,
    /// Origin upload cap in bytes per second; 0 means unshaped.
    pub origin_bandwidth: u64,
    /// Per-relay download cap in bytes per second; 0 means unshaped.
    pub relay_bandwidth: u64,
}

impl Default for ShardcastSection {
    fn default() -> Self {
        let s = SelectionConfig::default();
        let r = RelayPolicy::default();
        Self {
            relays: 2,
            shard_size: 64 * 1024,
            beta: s.beta,
            p_min: s.p_min,
            heal_after_ms: s.heal_after_ms,
            heal_pull: s.heal_pull,
            rate_per_sec: r.rate_per_sec,
            burst: r.burst,
            corrupt_relays: Vec::new(),
            throttled_relays: Vec::new(),
            throttled_rate_per_sec: 1.0,
            origin_bandwidth: 0,
            relay_bandwidth: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrchestratorSection {
    pub heartbeat_interval_ms: u64,
    pub max_missed: u32,
    pub pool_id: u64,
    pub domain_id: u64,
}

impl Default for OrchestratorSection {
    fn default() -> Self {
        let o = OrchestratorConfig::default();
        Self { heartbeat_interval_ms: o.heartbeat_interval_ms, max_missed: o.max_missed, pool_id: o.pool_id, domain_id: o.domain_id }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub pretrain: PretrainSection,
    pub train: TrainSection,
    pub workers: WorkerSection,
    pub validators: ValidatorSection,
    pub shardcast: ShardcastSection,
    pub orchestrator: OrchestratorSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        use crate::error::IoContext;
        Self::from_toml(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.train_config()?.validate()?;
        if self.run.async_level + 1 > RETAINED_VERSIONS as u64 {
            return bad(format!("async_level must be at most {}", RETAINED_VERSIONS - 1));
        }
        if self.run.async_level > self.train.max_staleness {
            return bad("async_level exceeds max_staleness".into());
        }
        if self.workers.groups_per_file == 0 {
            return bad("groups_per_file must be positive".into());
        }
        if self.validators.count == 0 || self.shardcast.relays == 0 {
            return bad("at least one validator and one relay are required".into());
        }
        if self.shardcast.shard_size == 0 {
            return bad("shard_size must be positive".into());
        }
        if self.shardcast.corrupt_relays.iter().any(|&r| r >= self.shardcast.relays) {
            return bad("corrupt_relays names a relay that does not exist".into());
        }
        if self.shardcast.throttled_relays.iter().any(|&r| r >= self.shardcast.relays) {
            return bad("throttled_relays names a relay that does not exist".into());
        }
        if !(self.shardcast.throttled_rate_per_sec > 0.0) {
            return bad("throttled_rate_per_sec must be positive".into());
        }
        if self.shardcast.corrupt_relays.len() >= self.shardcast.relays {
            return bad("at least one relay must be honest".into());
        }
        for a in &self.workers.adversarial {
            if swarm_core::adversary::Attack::parse(a).is_none() {
                return bad(format!("unknown attack {a:?}"));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { hidden_dim: self.model.hidden_dim, ..toy_model_config() }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let adv_mode = match t.adv_mode.as_str() {
            "mean_std" => AdvantageMode::MeanStd,
            "mean_only" => AdvantageMode::MeanOnly,
            s => return Err(Error::Config(format!("unknown adv_mode {s:?}"))),
        };
        let kl_reference = match t.kl_reference.as_str() {
            "initial" => KlReference::Initial,
            "last_checkpoint" => KlReference::LastCheckpoint,
            s => return Err(Error::Config(format!("unknown kl_reference {s:?}"))),
        };
        let old_logp_mode = match t.old_logp_mode.as_str() {
            "per_step" => OldLogProbMode::PerStep,
            "per_micro_step" => OldLogProbMode::PerMicroStep,
            s => return Err(Error::Config(format!("unknown old_logp_mode {s:?}"))),
        };
        Ok(TrainConfig {
            epsilon: t.epsilon,
            delta: t.delta,
            alpha: t.alpha,
            kl_coef: t.kl_coef,
            entropy_coef: t.entropy_coef,
            lr: t.lr,
            warmup_steps: t.warmup_steps,
            grad_clip: t.grad_clip,
            group_size: t.group_size,
            prompts_per_step: t.prompts_per_step,
            micro_steps: t.micro_steps,
            async_level: self.run.async_level,
            adv_eps: t.adv_eps,
            adv_mode,
            kl_reference,
            old_logp_mode,
        })
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        let t = &self.train;
        RolloutConfig {
            group_size: t.group_size,
            groups_per_file: self.workers.groups_per_file,
            temperature: self.workers.temperature,
            alpha: t.alpha,
            adv_eps: t.adv_eps,
            adv_mode: self.train_config().map(|c| c.adv_mode).unwrap_or_default(),
            eos_floor: self.validators.eos_threshold,
            ..RolloutConfig::default()
        }
    }

    pub fn validator_config(&self) -> ValidatorConfig {
        let v = &self.validators;
        ValidatorConfig {
            rollout: self.rollout_config(),
            p_low: v.p_low,
            theta: v.theta,
            min_sampling_len: v.min_sampling_len,
            eos_threshold: v.eos_threshold,
            commitment_rate: v.commitment_rate,
            commitment_seed: self.run.seed,
            model: self.model_config(),
            ..ValidatorConfig::default()
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig { seed: p.seed, steps: p.steps, known_fraction: p.known_fraction, ..PretrainConfig::default() }
    }

    pub fn selection_config(&self) -> SelectionConfig {
        let s = &self.shardcast;
        SelectionConfig { beta: s.beta, p_min: s.p_min, heal_after_ms: s.heal_after_ms, heal_pull: s.heal_pull }
    }

    pub fn relay_policy(&self) -> RelayPolicy {
        RelayPolicy { rate_per_sec: self.shardcast.rate_per_sec, burst: self.shardcast.burst, enforce_allowlist: true }
    }

    /// Policy of relay `index`, honoring `throttled_relays`.
    pub fn relay_policy_of(&self, index: usize) -> RelayPolicy {
        let s = &self.shardcast;
        if s.throttled_relays.contains(&index) {
            RelayPolicy { rate_per_sec: s.throttled_rate_per_sec, burst: 1.0, ..self.relay_policy() }
        } else {
            self.relay_policy()
        }
    }

    pub fn orchestrator_config(&self) -> OrchestratorConfig {
        let o = &self.orchestrator;
        OrchestratorConfig {
            pool_id: o.pool_id,
            domain_id: o.domain_id,
            heartbeat_interval_ms: o.heartbeat_interval_ms,
            max_missed: o.max_missed,
            ..OrchestratorConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train_config().unwrap(), TrainConfig { async_level: 2, ..TrainConfig::toy() });
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.run.async_level = 4;
        c.workers.adversarial = vec!["cherry-pick".into()];
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("[run]\nasync_level = 5\n").is_err());
        assert!(RunConfig::from_toml("[train]\nadv_mode = \"median\"\n").is_err());
        assert!(RunConfig::from_toml("[workers]\nadversarial = [\"bribery\"]\n").is_err());
        assert!(RunConfig::from_toml("[run]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[shardcast]\nrelays = 1\ncorrupt_relays = [0]\n").is_err());
    }
}
