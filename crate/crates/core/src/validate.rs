//! Validator checks over a parsed rollout file.
//!
//! Checks run cheapest first: structure (the parsed part of the schema
//! check), seed, bounds, termination, sampling, commitment. Termination,
//! sampling and commitment share one teacher-forced prefill per record under
//! the claimed checkpoint. Validation never samples tokens.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::grpo::{advantage_bound, compute_advantages};
use crate::model::{sequence_logprobs, ModelConfig, Policy, Prefill};
use crate::rng::{substream_seed, SplitMix64};
use crate::rollout::{build_commitments, derive_seed, select_prompts, RolloutConfig, RolloutFile, SCHEMA_VERSION};
use crate::tasks::{toy_model_config, total_reward, verify, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FailedCheck {
    Commitment,
    Termination,
    Sampling,
    Seed,
    Bounds,
    Schema,
}

impl FailedCheck {
    pub const ALL: [FailedCheck; 6] = [
        FailedCheck::Schema,
        FailedCheck::Seed,
        FailedCheck::Bounds,
        FailedCheck::Termination,
        FailedCheck::Sampling,
        FailedCheck::Commitment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailedCheck::Commitment => "commitment",
            FailedCheck::Termination => "termination",
            FailedCheck::Sampling => "sampling",
            FailedCheck::Seed => "seed",
            FailedCheck::Bounds => "bounds",
            FailedCheck::Schema => "schema",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for FailedCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Outcome of validating one file. Rejected iff `failed_check` is set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub file_id: String,
    pub failed_check: Option<FailedCheck>,
    pub details: String,
}

impl Verdict {
    pub fn accept(file_id: impl Into<String>) -> Self {
        Self { file_id: file_id.into(), failed_check: None, details: String::new() }
    }

    pub fn reject(file_id: impl Into<String>, check: FailedCheck, details: impl Into<String>) -> Self {
        Self { file_id: file_id.into(), failed_check: Some(check), details: details.into() }
    }

    pub fn is_accept(&self) -> bool {
        self.failed_check.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidatorConfig {
    /// Group size, prompts per file, reward weight and advantage settings;
    /// must match the workers'.
    pub rollout: RolloutConfig,
    /// Chosen-token probability counted as "low" by the sampling check.
    pub p_low: f64,
    /// Largest tolerated fraction of low-probability tokens.
    pub theta: f64,
    /// Records shorter than this are exempt from the sampling check.
    pub min_sampling_len: usize,
    /// Recomputed EOS probability must exceed this.
    pub eos_threshold: f64,
    /// Probability that a record's commitments are recomputed.
    pub commitment_rate: f64,
    pub commitment_seed: u64,
    /// Slack for recomputed rewards and advantages.
    pub tolerance: f64,
    /// Shape of the policy being validated.
    pub model: ModelConfig,
}

impl Default for ValidatorConfig {
    fn default() -> Self {
        Self {
            rollout: RolloutConfig::default(),
            p_low: 0.02,
            theta: 0.25,
            min_sampling_len: 16,
            eos_threshold: crate::rollout::EOS_FLOOR,
            commitment_rate: 1.0,
            commitment_seed: 0,
            tolerance: 1e-9,
            model: toy_model_config(),
        }
    }
}

/// Checkpoints a validator can prefill under.
pub trait CheckpointStore {
    fn checkpoint(&self, version: u64) -> Option<&Policy>;
}

impl CheckpointStore for BTreeMap<u64, Policy> {
    fn checkpoint(&self, version: u64) -> Option<&Policy> {
        self.get(&version)
    }
}

type Check = core::result::Result<(), (FailedCheck, String)>;

fn fail(check: FailedCheck, details: impl Into<String>) -> Check {
    Err((check, details.into()))
}

/// Structural validity of an already-parsed file.
pub fn check_structure(file: &RolloutFile, cfg: &ValidatorConfig) -> Check {
    let (max_len, vocab) = (cfg.model.max_len, cfg.model.vocab);
    let h = &file.header;
    let g = cfg.rollout.group_size;
    if h.schema_version != SCHEMA_VERSION {
        return fail(FailedCheck::Schema, format!("schema version {}", h.schema_version));
    }
    if file.verify_signature().is_err() {
        return fail(FailedCheck::Schema, "bad signature");
    }
    if file.records.len() != g * cfg.rollout.groups_per_file {
        return fail(FailedCheck::Schema, format!("{} records, expected {}", file.records.len(), g * cfg.rollout.groups_per_file));
    }
    for (gi, group) in file.groups(g).enumerate() {
        if group.iter().any(|r| r.task_id != group[0].task_id || r.checkpoint_version != group[0].checkpoint_version) {
            return fail(FailedCheck::Schema, format!("group {gi} mixes prompts or checkpoints"));
        }
    }
    for (i, r) in file.records.iter().enumerate() {
        let bad = |what: &str| fail(FailedCheck::Schema, format!("record {i}: {what}"));
        if r.node_address != h.node_address || r.step != h.step || r.submission_index != h.submission_index {
            return bad("provenance differs from header");
        }
        let n = r.output_tokens.len();
        if n == 0 || n > max_len {
            return bad("output length");
        }
        if r.output_tokens.iter().any(|&t| t as usize >= vocab) {
            return bad("token out of vocabulary");
        }
        if r.chosen_probs.len() != n {
            return bad("chosen_probs length");
        }
        if r.commitments.len() != n.div_ceil(cfg.rollout.commit_interval) {
            return bad("commitment count");
        }
        let scalars = [r.r_task, r.r_total, r.advantage];
        if r.chosen_probs.iter().chain(&r.eos_prob_at_end).chain(&scalars).any(|x| !x.is_finite()) {
            return bad("non-finite value");
        }
    }
    Ok(())
}

/// Reproduces prompt selection; returns the selected tasks in order.
pub fn check_seed<'d>(file: &RolloutFile, dataset: &'d [Task], cfg: &ValidatorConfig) -> core::result::Result<Vec<&'d Task>, (FailedCheck, String)> {
    let h = &file.header;
    let seed = derive_seed(&h.node_address, h.step, h.submission_index);
    let picks = select_prompts(seed, dataset.len(), cfg.rollout.groups_per_file);
    let g = cfg.rollout.group_size;
    if picks.len() * g != file.records.len() {
        return Err((FailedCheck::Seed, "dataset too small for the file".into()));
    }
    let mut tasks = Vec::with_capacity(picks.len());
    for (gi, (group, idx)) in file.groups(g).zip(picks).enumerate() {
        let task = &dataset[idx];
        if group[0].task_id != task.task_id {
            return Err((FailedCheck::Seed, format!("group {gi}: task {} where {} was selected", group[0].task_id, task.task_id)));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

pub fn check_bounds(file: &RolloutFile, tasks: &[&Task], cfg: &ValidatorConfig) -> Check {
    let rc = &cfg.rollout;
    let max_len = cfg.model.max_len;
    let tol = cfg.tolerance;
    let a_max = advantage_bound(rc.group_size);
    let floor = -rc.alpha * max_len as f64;
    for (gi, (group, task)) in file.groups(rc.group_size).zip(tasks).enumerate() {
        for (j, r) in group.iter().enumerate() {
            let at = |what: &str| fail(FailedCheck::Bounds, format!("group {gi} record {j}: {what}"));
            if r.r_task != 0.0 && r.r_task != 1.0 {
                return at("r_task not binary");
            }
            if !(floor - tol <= r.r_total && r.r_total <= 1.0 + tol) {
                return at("r_total out of range");
            }
            if r.advantage.abs() > a_max {
                return at("advantage out of range");
            }
            if verify(task, &r.output_tokens) as f64 != r.r_task {
                return at("r_task disagrees with verifier");
            }
            let want = total_reward(task, &r.output_tokens, rc.alpha).r_total;
            if (want - r.r_total).abs() > tol {
                return at("r_total disagrees with recomputation");
            }
        }
        let rewards: Vec<f64> = group.iter().map(|r| r.r_total).collect();
        let adv = compute_advantages(&rewards, rc.adv_eps, rc.adv_mode);
        if group.iter().zip(&adv).any(|(r, a)| (r.advantage - a).abs() > tol) {
            return fail(FailedCheck::Bounds, format!("group {gi}: advantages disagree with recomputation"));
        }
    }
    Ok(())
}

pub fn check_termination(prompt_len: usize, output: &[u32], prefill: &Prefill, policy: &Policy, eos_threshold: f64) -> Check {
    let c = &policy.config;
    if prompt_len + output.len() == c.max_len {
        return Ok(());
    }
    if output.last() != Some(&c.eos_id) {
        return fail(FailedCheck::Termination, "ends before max length without EOS");
    }
    let p = prefill.eos_probs.last().copied().unwrap_or(0.0);
    if !(p > eos_threshold) {
        return fail(FailedCheck::Termination, format!("EOS probability {p:.4} at or below {eos_threshold}"));
    }
    Ok(())
}

/// Fraction of recomputed chosen-token probabilities below `p_low`.
pub fn low_probability_fraction(chosen_probs: &[f64], p_low: f64) -> f64 {
    if chosen_probs.is_empty() {
        return 0.0;
    }
    chosen_probs.iter().filter(|&&p| p < p_low).count() as f64 / chosen_probs.len() as f64
}

pub fn check_sampling(prefill: &Prefill, cfg: &ValidatorConfig) -> Check {
    if prefill.chosen_probs.len() < cfg.min_sampling_len {
        return Ok(());
    }
    let frac = low_probability_fraction(&prefill.chosen_probs, cfg.p_low);
    if frac > cfg.theta {
        return fail(FailedCheck::Sampling, format!("{frac:.3} of tokens below p={}", cfg.p_low));
    }
    Ok(())
}

pub fn check_commitments(submitted: &[[u8; 32]], prefill: &Prefill, policy: &Policy, interval: usize) -> Check {
    let recomputed = build_commitments(&prefill.hidden, policy.config.hidden_dim, interval);
    match recomputed.iter().zip(submitted).position(|(a, b)| a != b) {
        Some(j) => fail(FailedCheck::Commitment, format!("digest {j} differs")),
        None if recomputed.len() != submitted.len() => fail(FailedCheck::Commitment, "digest count differs"),
        None => Ok(()),
    }
}

/// Runs every check on a parsed file. Schema failures detected while
/// parsing are the caller's to report.
pub fn validate_file(file: &RolloutFile, dataset: &[Task], store: &impl CheckpointStore, cfg: &ValidatorConfig) -> Verdict {
    let id = file.file_id();
    match run_checks(file, dataset, store, cfg, None) {
        Ok(()) => Verdict::accept(id),
        Err((check, details)) => Verdict::reject(id, check, details),
    }
}

/// Runs the checks that precede `stop` in the validation order.
pub fn checks_before(file: &RolloutFile, dataset: &[Task], store: &impl CheckpointStore, cfg: &ValidatorConfig, stop: FailedCheck) -> Check {
    run_checks(file, dataset, store, cfg, Some(stop))
}

fn run_checks(file: &RolloutFile, dataset: &[Task], store: &impl CheckpointStore, cfg: &ValidatorConfig, stop: Option<FailedCheck>) -> Check {
    let rc = &cfg.rollout;
    let halt = |c: FailedCheck| stop == Some(c);
    if halt(FailedCheck::Schema) {
        return Ok(());
    }
    check_structure(file, cfg)?;
    if halt(FailedCheck::Seed) {
        return Ok(());
    }
    let tasks = check_seed(file, dataset, cfg)?;
    if halt(FailedCheck::Bounds) {
        return Ok(());
    }
    check_bounds(file, &tasks, cfg)?;

    let mut prefills = Vec::with_capacity(file.records.len());
    for (gi, (group, task)) in file.groups(rc.group_size).zip(&tasks).enumerate() {
        let v = group[0].checkpoint_version;
        let Some(policy) = store.checkpoint(v) else {
            return fail(FailedCheck::Commitment, format!("unknown checkpoint {v}"));
        };
        if policy.config != cfg.model {
            return fail(FailedCheck::Commitment, format!("checkpoint {v} has a different shape"));
        }
        for r in group {
            if task.prompt_tokens.len() + r.output_tokens.len() > policy.config.max_len {
                return fail(FailedCheck::Schema, format!("group {gi}: sequence exceeds max length"));
            }
            let pre = sequence_logprobs(policy, &task.prompt_tokens, &r.output_tokens)
                .map_err(|e| (FailedCheck::Schema, format!("group {gi}: {e}")))?;
            prefills.push((policy, task.prompt_tokens.len(), pre));
        }
    }
    if halt(FailedCheck::Termination) {
        return Ok(());
    }
    for (r, (policy, plen, pre)) in file.records.iter().zip(&prefills) {
        check_termination(*plen, &r.output_tokens, pre, policy, cfg.eos_threshold)?;
    }
    if halt(FailedCheck::Sampling) {
        return Ok(());
    }
    for (_, _, pre) in &prefills {
        check_sampling(pre, cfg)?;
    }
    if halt(FailedCheck::Commitment) {
        return Ok(());
    }
    let h = &file.header;
    let mut rng = (cfg.commitment_rate < 1.0).then(|| {
        let seed = derive_seed(&h.node_address, h.step, h.submission_index);
        SplitMix64::new(substream_seed(cfg.commitment_seed, seed))
    });
    for (r, (policy, _, pre)) in file.records.iter().zip(&prefills) {
        if let Some(rng) = rng.as_mut() {
            if rng.next_f64() >= cfg.commitment_rate {
                continue;
            }
        }
        check_commitments(&r.commitments, pre, policy, rc.commit_interval)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::Keypair;
    use crate::model::PolicyParams;
    use crate::rollout::build_file;
    use crate::tasks::{generate_dataset, toy_model_config, vocab};

    fn fixture() -> (BTreeMap<u64, Policy>, Vec<Task>, ValidatorConfig) {
        let mut p = PolicyParams::init_random(toy_model_config(), 2, 0.2);
        p.out_b[vocab::EOS as usize] = 2.0;
        let mut store = BTreeMap::new();
        store.insert(0, Policy::new(p));
        let cfg = ValidatorConfig { rollout: RolloutConfig { groups_per_file: 2, ..Default::default() }, ..Default::default() };
        (store, generate_dataset(3, 40), cfg)
    }

    fn honest(store: &BTreeMap<u64, Policy>, data: &[Task], cfg: &ValidatorConfig) -> RolloutFile {
        build_file(&store[&0], data, &Keypair::derive("w", 1), 4, 0, 0, &cfg.rollout).unwrap()
    }

    #[test]
    fn honest_file_is_accepted() {
        let (store, data, cfg) = fixture();
        let f = honest(&store, &data, &cfg);
        let v = validate_file(&f, &data, &store, &cfg);
        assert!(v.is_accept(), "{v:?}");
        assert_eq!(v.file_id, f.file_id());
    }

    #[test]
    fn missing_group_member_is_schema() {
        let (store, data, cfg) = fixture();
        let key = Keypair::derive("w", 1);
        let mut f = honest(&store, &data, &cfg);
        f.records.pop();
        f.sign(&key);
        assert_eq!(validate_file(&f, &data, &store, &cfg).failed_check, Some(FailedCheck::Schema));
    }

    #[test]
    fn swapped_group_order_is_seed() {
        let (store, data, cfg) = fixture();
        let key = Keypair::derive("w", 1);
        let mut f = honest(&store, &data, &cfg);
        let g = cfg.rollout.group_size;
        let (a, b) = f.records.split_at_mut(g);
        a.swap_with_slice(&mut b[..g]);
        f.sign(&key);
        assert_eq!(validate_file(&f, &data, &store, &cfg).failed_check, Some(FailedCheck::Seed));
    }

    #[test]
    fn huge_advantage_is_bounds() {
        let (store, data, cfg) = fixture();
        let key = Keypair::derive("w", 1);
        let mut f = honest(&store, &data, &cfg);
        f.records[0].advantage = 100.0;
        f.sign(&key);
        assert_eq!(validate_file(&f, &data, &store, &cfg).failed_check, Some(FailedCheck::Bounds));
    }

    #[test]
    fn unknown_checkpoint_is_commitment() {
        let (store, data, cfg) = fixture();
        let f = honest(&store, &data, &cfg);
        let empty: BTreeMap<u64, Policy> = BTreeMap::new();
        let v = validate_file(&f, &data, &empty, &cfg);
        assert_eq!(v.failed_check, Some(FailedCheck::Commitment));
        assert!(v.details.contains("unknown checkpoint"));
    }

    #[test]
    fn termination_thresholds() {
        let mut p = PolicyParams::zeros(toy_model_config());
        // EOS gets probability e^b / (e^b + 20).
        let eos_bias = |p_eos: f64| libm::log(20.0 * p_eos / (1.0 - p_eos));
        let prompt = [vocab::BUDGET_BASE, 1, vocab::PLUS, 1, vocab::EQUALS];
        let out = [vocab::DELIM, 2, vocab::EOS];
        for (p_eos, ok) in [(0.5, true), (0.05, false)] {
            p.out_b[vocab::EOS as usize] = eos_bias(p_eos);
            let policy = Policy::new(p.clone());
            let pre = sequence_logprobs(&policy, &prompt, &out).unwrap();
            assert!((pre.eos_probs[2] - p_eos).abs() < 1e-12);
            assert_eq!(check_termination(5, &out, &pre, &policy, 0.1).is_ok(), ok);
        }
        let policy = Policy::new(p);
        let full = alloc::vec![3; policy.config.max_len - 5];
        let pre = sequence_logprobs(&policy, &prompt, &full).unwrap();
        assert!(check_termination(5, &full, &pre, &policy, 0.1).is_ok());
        let short = [3, 3];
        let pre = sequence_logprobs(&policy, &prompt, &short).unwrap();
        assert!(check_termination(5, &short, &pre, &policy, 0.1).is_err());
    }

    #[test]
    fn sampling_check_ignores_the_high_mode() {
        let cfg = ValidatorConfig::default();
        let greedy = Prefill { chosen_probs: alloc::vec![0.99; 20], ..Default::default() };
        assert!(check_sampling(&greedy, &cfg).is_ok());
        let mut subst = alloc::vec![0.9; 20];
        subst[..6].fill(0.001);
        assert!(check_sampling(&Prefill { chosen_probs: subst.clone(), ..Default::default() }, &cfg).is_err());
        subst.truncate(15);
        assert!(check_sampling(&Prefill { chosen_probs: subst, ..Default::default() }, &cfg).is_ok());
    }

    #[test]
    fn failed_check_names_round_trip() {
        for c in FailedCheck::ALL {
            assert_eq!(FailedCheck::parse(c.as_str()), Some(c));
        }
        assert_eq!(FailedCheck::parse("nope"), None);
    }
}
