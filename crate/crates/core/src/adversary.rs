//! Dishonest workers. Each attack yields a signed rollout file that is
//! internally consistent as far as the attacker can make it, so that only the
//! check aimed at that attack can catch it.

use alloc::vec::Vec;
use core::fmt;

use crate::crypto::Keypair;
use crate::error::{Error, Result};
use crate::model::{sequence_logprobs, Policy, PolicyParams, TokenId};
use crate::rollout::{
    assign_advantages, build_commitments, build_file, derive_seed, generate_group, sampling_rng, select_prompts,
    Provenance, RolloutFile, RolloutRecord,
};
use crate::rng::{substream_seed, SplitMix64};
use crate::tasks::{total_reward, vocab, Task};
use crate::validate::{checks_before, CheckpointStore, FailedCheck, ValidatorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Attack {
    /// Samples from a cheaper or older model while claiming the current checkpoint.
    WrongModel,
    /// Cuts a completion short with an EOS the policy would not have emitted.
    EarlyEos,
    /// Replaces a selected prompt with one of its own choosing.
    CherryPick,
    /// Claims success on a failed completion, with rewards and advantages made consistent.
    ForgedReward,
    /// Drops a record from a group.
    Malformed,
    /// Overwrites the middle of reasoning spans with tokens the policy finds unlikely,
    /// then prefills with the real model so commitments match.
    TokenSubstitution,
}

impl Attack {
    pub const ALL: [Attack; 6] = [
        Attack::WrongModel,
        Attack::EarlyEos,
        Attack::CherryPick,
        Attack::ForgedReward,
        Attack::Malformed,
        Attack::TokenSubstitution,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Attack::WrongModel => "wrong-model",
            Attack::EarlyEos => "early-eos",
            Attack::CherryPick => "cherry-pick",
            Attack::ForgedReward => "forged-reward",
            Attack::Malformed => "malformed-file",
            Attack::TokenSubstitution => "token-substitution",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s)
    }

    /// The check that must name this attack.
    pub fn expected_check(self) -> FailedCheck {
        match self {
            Attack::WrongModel => FailedCheck::Commitment,
            Attack::EarlyEos => FailedCheck::Termination,
            Attack::CherryPick => FailedCheck::Seed,
            Attack::ForgedReward => FailedCheck::Bounds,
            Attack::Malformed => FailedCheck::Schema,
            Attack::TokenSubstitution => FailedCheck::Sampling,
        }
    }
}

impl fmt::Display for Attack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What an attacker works with. `policy` is the checkpoint it is supposed to
/// use; `wrong` is what [`Attack::WrongModel`] actually samples from.
pub struct Attacker<'a> {
    pub policy: &'a Policy,
    pub wrong: &'a Policy,
    pub dataset: &'a [Task],
    pub key: &'a Keypair,
    pub step: u64,
    pub version: u64,
    pub cfg: &'a ValidatorConfig,
}

/// Rounds every weight to a multiple of `quantum`.
pub fn quantize(params: &PolicyParams, quantum: f64) -> PolicyParams {
    let mut q = params.clone();
    for x in q.iter_mut() {
        *x = libm::round(*x / quantum) * quantum;
    }
    q
}

impl Attacker<'_> {
    fn honest(&self, submission_index: u64) -> Result<RolloutFile> {
        build_file(self.policy, self.dataset, self.key, self.step, submission_index, self.version, &self.cfg.rollout)
    }

    /// Recomputes everything derivable from a record's tokens under the real
    /// policy, the way a careful cheater would.
    fn rebuild(&self, r: &mut RolloutRecord, task: &Task) -> Result<()> {
        let pre = sequence_logprobs(self.policy, &task.prompt_tokens, &r.output_tokens)?;
        r.commitments = build_commitments(&pre.hidden, self.policy.config.hidden_dim, self.cfg.rollout.commit_interval);
        r.chosen_probs = pre.chosen_probs;
        r.eos_prob_at_end = (r.output_tokens.last() == Some(&self.policy.config.eos_id)).then(|| *pre.eos_probs.last().unwrap());
        let reward = total_reward(task, &r.output_tokens, self.cfg.rollout.alpha);
        r.r_task = reward.r_task;
        r.r_total = reward.r_total;
        Ok(())
    }

    fn selected(&self, file: &RolloutFile) -> Vec<&Task> {
        let h = &file.header;
        let seed = derive_seed(&h.node_address, h.step, h.submission_index);
        select_prompts(seed, self.dataset.len(), self.cfg.rollout.groups_per_file)
            .into_iter()
            .map(|i| &self.dataset[i])
            .collect()
    }

    /// One attempt at `attack`; may or may not evade the cheaper checks.
    pub fn forge(&self, attack: Attack, submission_index: u64) -> Result<RolloutFile> {
        let g = self.cfg.rollout.group_size;
        let mut file = match attack {
            Attack::WrongModel => {
                build_file(self.wrong, self.dataset, self.key, self.step, submission_index, self.version, &self.cfg.rollout)?
            }
            _ => self.honest(submission_index)?,
        };
        let tasks: Vec<Task> = self.selected(&file).into_iter().cloned().collect();
        let mut rng = SplitMix64::new(substream_seed(0xad7e, derive_seed(&self.key.address(), self.step, submission_index)));
        match attack {
            Attack::WrongModel => {}
            Attack::Malformed => {
                file.records.remove(rng.below(file.records.len() as u64) as usize);
            }
            Attack::CherryPick => {
                let chosen: Vec<u64> = tasks.iter().map(|t| t.task_id).collect();
                let easy = self
                    .dataset
                    .iter()
                    .filter(|t| !chosen.contains(&t.task_id))
                    .max_by_key(|t| t.l_target)
                    .ok_or_else(|| Error::Protocol("dataset too small to cherry-pick".into()))?;
                let slot = rng.below(tasks.len() as u64) as usize;
                let from = Provenance {
                    node_address: self.key.address(),
                    step: self.step,
                    submission_index,
                    checkpoint_version: self.version,
                };
                let group = generate_group(self.policy, easy, &self.cfg.rollout, from, &mut sampling_rng(rng.next_u64()))?;
                file.records.splice(slot * g..(slot + 1) * g, group);
            }
            Attack::ForgedReward => {
                let at = file
                    .records
                    .iter()
                    .position(|r| r.r_task == 0.0)
                    .ok_or_else(|| Error::Protocol("no failed completion to forge".into()))?;
                file.records[at].r_task = 1.0;
                file.records[at].r_total += 1.0;
                let gi = at / g;
                assign_advantages(&mut file.records[gi * g..(gi + 1) * g], &self.cfg.rollout);
            }
            Attack::EarlyEos => {
                let eos = self.policy.config.eos_id;
                let mut done = false;
                for (i, r) in file.records.iter_mut().enumerate() {
                    let task = &tasks[i / g];
                    let out = &r.output_tokens;
                    let pre = sequence_logprobs(self.policy, &task.prompt_tokens, out)?;
                    // Earliest cut whose EOS the policy finds unlikely.
                    let cut = (1..out.len()).find(|&j| out[j] != eos && pre.eos_probs[j] <= self.cfg.eos_threshold);
                    if let Some(j) = cut {
                        let mut short = out[..j].to_vec();
                        short.push(eos);
                        r.output_tokens = short;
                        self.rebuild(r, task)?;
                        done = true;
                        break;
                    }
                }
                if !done {
                    return Err(Error::Protocol("no position to truncate".into()));
                }
                for gi in 0..tasks.len() {
                    assign_advantages(&mut file.records[gi * g..(gi + 1) * g], &self.cfg.rollout);
                }
            }
            Attack::TokenSubstitution => {
                let min_len = self.cfg.min_sampling_len;
                let mut touched = 0;
                for (i, r) in file.records.iter_mut().enumerate() {
                    let n = r.output_tokens.len();
                    let delim = r.output_tokens.iter().position(|&t| t == vocab::DELIM).unwrap_or(n);
                    if n < min_len || delim < 4 {
                        continue;
                    }
                    // Middle of the reasoning span, about two thirds of the record.
                    let (lo, hi) = (1, delim - 1);
                    for t in &mut r.output_tokens[lo..hi] {
                        let mut sub = rng.below(vocab::EQUALS as u64 + 1) as TokenId;
                        if sub == *t {
                            sub = (sub + 1) % (vocab::EQUALS + 1);
                        }
                        *t = sub;
                    }
                    self.rebuild(r, &tasks[i / g])?;
                    touched += 1;
                }
                if touched == 0 {
                    return Err(Error::Protocol("no record long enough to substitute".into()));
                }
                for gi in 0..tasks.len() {
                    assign_advantages(&mut file.records[gi * g..(gi + 1) * g], &self.cfg.rollout);
                }
            }
        }
        file.sign(self.key);
        Ok(file)
    }

    /// The first attempt, from `first_index` on, that passes every check
    /// preceding the one aimed at `attack`.
    pub fn evasive(&self, attack: Attack, store: &impl CheckpointStore, first_index: u64, attempts: u64) -> Result<RolloutFile> {
        for s in first_index..first_index + attempts {
            let Ok(file) = self.forge(attack, s) else {
                continue;
            };
            if checks_before(&file, self.dataset, store, self.cfg, attack.expected_check()).is_ok() {
                return Ok(file);
            }
        }
        Err(Error::Protocol(alloc::format!("{attack}: no evasive file in {attempts} attempts")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretrain::{pretrain_base, PretrainConfig};
    use crate::rollout::RolloutConfig;
    use crate::tasks::{generate_dataset, toy_model_config};
    use crate::validate::validate_file;
    use alloc::collections::BTreeMap;

    #[test]
    fn names_round_trip() {
        for a in Attack::ALL {
            assert_eq!(Attack::parse(a.as_str()), Some(a));
        }
        let checks: alloc::collections::BTreeSet<_> = Attack::ALL.iter().map(|a| a.expected_check()).collect();
        assert_eq!(checks.len(), 6);
    }

    #[test]
    fn quantization_moves_weights_onto_grid() {
        let p = PolicyParams::init_random(toy_model_config(), 1, 0.3);
        let q = quantize(&p, 1.0 / 64.0);
        assert!(q.iter().all(|x| (x * 64.0).fract() == 0.0));
        assert!(p.distance(&q) > 0.0);
    }

    #[test]
    fn every_attack_is_named_by_its_check() {
        let model = toy_model_config();
        let base = pretrain_base(model, &PretrainConfig { steps: 150, ..Default::default() }).unwrap();
        let policy = Policy::new(base.clone());
        let wrong = Policy::new(quantize(&base, 1.0 / 64.0));
        let mut store = BTreeMap::new();
        store.insert(0, policy.clone());
        let dataset = generate_dataset(7, 64);
        let cfg = ValidatorConfig { rollout: RolloutConfig { groups_per_file: 2, ..Default::default() }, ..Default::default() };
        let key = Keypair::derive("cheat", 0);
        let atk = Attacker { policy: &policy, wrong: &wrong, dataset: &dataset, key: &key, step: 3, version: 0, cfg: &cfg };
        for a in Attack::ALL {
            let f = atk.evasive(a, &store, 0, 20).unwrap();
            let v = validate_file(&f, &dataset, &store, &cfg);
            assert_eq!(v.failed_check, Some(a.expected_check()), "{a}: {v:?}");
        }
    }
}
