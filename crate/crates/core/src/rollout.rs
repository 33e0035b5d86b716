//! Rollout generation on untrusted workers: deterministic prompt selection,
//! group sampling, interval commitments over hidden states, and signed
//! rollout files.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::crypto::{sha256_chain, Address, Digest, Keypair, SignatureBytes};
use crate::error::{Error, Result};
use crate::grpo::{compute_advantages, AdvantageMode};
use crate::model::{Policy, TokenId};
use crate::rng::{substream_seed, SplitMix64};
use crate::tasks::{total_reward, Task};

pub const SCHEMA_VERSION: u32 = 1;
/// Tokens per commitment interval.
pub const COMMIT_INTERVAL: usize = 32;

/// Data-sampling seed: `addr · step + submission_index (mod 2^64)`, where
/// `addr` is the little-endian integer of the address's first eight bytes.
pub fn derive_seed(node: &Address, step: u64, submission_index: u64) -> u64 {
    node.seed_int().wrapping_mul(step).wrapping_add(submission_index)
}

/// Dataset positions for one submission, drawn without replacement by a
/// Fisher–Yates shuffle truncated after `count` swaps and driven by
/// `SplitMix64::new(seed)`: draw `i` swaps position `i` with `i + below(n - i)`.
/// The order of the result is part of the contract.
pub fn select_prompts(seed: u64, dataset_len: usize, count: usize) -> Vec<usize> {
    let mut rng = SplitMix64::new(seed);
    let n = dataset_len;
    let count = count.min(n);
    let mut swapped: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let j = i + rng.below((n - i) as u64) as usize;
        let at_i = *swapped.get(&i).unwrap_or(&i);
        let at_j = *swapped.get(&j).unwrap_or(&j);
        swapped.insert(j, at_i);
        out.push(at_j);
    }
    out
}

/// One sampled completion with everything needed to build a record.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub output: Vec<TokenId>,
    pub chosen_probs: Vec<f64>,
    pub eos_prob_at_end: Option<f64>,
    /// `len(output) × H` hidden vectors.
    pub hidden: Vec<f64>,
}

/// EOS is never sampled where its probability is at or below this; the
/// validator's termination check rejects such endings.
pub const EOS_FLOOR: f64 = 0.1;

/// Samples token by token until EOS or until the sequence reaches `max_len`.
/// Tokens are drawn from `softmax(logits / temperature)`, with EOS excluded
/// wherever its probability is at most `eos_floor`; recorded probabilities
/// are those of the untempered policy.
pub fn sample_completion(
    params: &Policy,
    prompt: &[TokenId],
    temperature: f64,
    eos_floor: f64,
    rng: &mut SplitMix64,
) -> Result<Completion> {
    if !(temperature > 0.0) {
        return Err(crate::error::invalid("temperature must be positive"));
    }
    let c = &params.config;
    let mut history = prompt.to_vec();
    let mut out = Completion { output: Vec::new(), chosen_probs: Vec::new(), eos_prob_at_end: None, hidden: Vec::new() };
    let mut tempered = alloc::vec![0.0; c.vocab];
    while history.len() < c.max_len {
        let act = params.forward_history(&history)?;
        let mask = act.probs[c.eos_id as usize] <= eos_floor;
        let tok = if temperature == 1.0 && !mask {
            rng.categorical(&act.probs)
        } else {
            for (t, &p) in tempered.iter_mut().zip(&act.probs) {
                *t = if temperature == 1.0 { p } else { libm::pow(p, 1.0 / temperature) };
            }
            if mask {
                tempered[c.eos_id as usize] = 0.0;
            }
            rng.categorical(&tempered)
        } as TokenId;
        out.output.push(tok);
        out.chosen_probs.push(act.probs[tok as usize]);
        out.hidden.extend_from_slice(&act.hidden);
        history.push(tok);
        if tok == c.eos_id {
            out.eos_prob_at_end = Some(act.probs[tok as usize]);
            break;
        }
    }
    Ok(out)
}

/// Hidden values are rounded to six decimals and hashed as `i64` LE of
/// `round(x · 1e6)`.
fn rounded_bytes(values: &[f64], buf: &mut Vec<u8>) {
    for &x in values {
        let q = libm::round(x * 1e6) as i64;
        buf.extend_from_slice(&q.to_le_bytes());
    }
}

/// Chained digests over `interval`-token windows of hidden vectors:
/// `d_j = SHA-256(d_{j-1} ‖ rounded(hidden[jK..(j+1)K]))`, `d_{-1} = 0³²`.
pub fn build_commitments(hidden: &[f64], hidden_dim: usize, interval: usize) -> Vec<Digest> {
    assert!(interval >= 1 && hidden_dim >= 1);
    let positions = hidden.len() / hidden_dim;
    let mut prev = [0u8; 32];
    let mut out = Vec::with_capacity(positions.div_ceil(interval));
    let mut buf = Vec::with_capacity(interval * hidden_dim * 8);
    for chunk in hidden.chunks(interval * hidden_dim) {
        buf.clear();
        rounded_bytes(chunk, &mut buf);
        prev = sha256_chain(&prev, &buf);
        out.push(prev);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub node_address: Address,
    pub step: u64,
    pub submission_index: u64,
    pub task_id: u64,
    pub checkpoint_version: u64,
    pub output_tokens: Vec<TokenId>,
    pub chosen_probs: Vec<f64>,
    pub commitments: Vec<Digest>,
    pub eos_prob_at_end: Option<f64>,
    pub r_task: f64,
    pub r_total: f64,
    pub advantage: f64,
}

/// Where a group of records comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub node_address: Address,
    pub step: u64,
    pub submission_index: u64,
    pub checkpoint_version: u64,
}

/// Sampling and reward settings shared by workers and validators.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    pub group_size: usize,
    pub groups_per_file: usize,
    pub temperature: f64,
    pub alpha: f64,
    pub adv_eps: f64,
    pub adv_mode: AdvantageMode,
    pub commit_interval: usize,
    pub eos_floor: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            groups_per_file: 4,
            temperature: 1.0,
            alpha: 0.01,
            adv_eps: 1e-6,
            adv_mode: AdvantageMode::MeanStd,
            commit_interval: COMMIT_INTERVAL,
            eos_floor: EOS_FLOOR,
        }
    }
}

/// `G` completions for `task`, with rewards and group advantages filled in.
pub fn generate_group(
    params: &Policy,
    task: &Task,
    cfg: &RolloutConfig,
    from: Provenance,
    rng: &mut SplitMix64,
) -> Result<Vec<RolloutRecord>> {
    let mut records = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        let c = sample_completion(params, &task.prompt_tokens, cfg.temperature, cfg.eos_floor, rng)?;
        let reward = total_reward(task, &c.output, cfg.alpha);
        records.push(RolloutRecord {
            node_address: from.node_address,
            step: from.step,
            submission_index: from.submission_index,
            task_id: task.task_id,
            checkpoint_version: from.checkpoint_version,
            commitments: build_commitments(&c.hidden, params.config.hidden_dim, cfg.commit_interval),
            output_tokens: c.output,
            chosen_probs: c.chosen_probs,
            eos_prob_at_end: c.eos_prob_at_end,
            r_task: reward.r_task,
            r_total: reward.r_total,
            advantage: 0.0,
        });
    }
    assign_advantages(&mut records, cfg);
    Ok(records)
}

pub fn assign_advantages(group: &mut [RolloutRecord], cfg: &RolloutConfig) {
    let rewards: Vec<f64> = group.iter().map(|r| r.r_total).collect();
    for (r, a) in group.iter_mut().zip(compute_advantages(&rewards, cfg.adv_eps, cfg.adv_mode)) {
        r.advantage = a;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FileHeader {
    pub schema_version: u32,
    pub node_address: Address,
    pub step: u64,
    pub submission_index: u64,
    pub signature: SignatureBytes,
}

/// A worker's submission: consecutive groups of `G` records, one group per
/// selected prompt, in selection order.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutFile {
    pub header: FileHeader,
    pub records: Vec<RolloutRecord>,
}

struct Canon(Vec<u8>);

impl Canon {
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_bits().to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
}

impl RolloutFile {
    pub fn file_id(&self) -> alloc::string::String {
        file_id(self.header.step, &self.header.node_address, self.header.submission_index)
    }

    /// Canonical binary encoding of everything but the signature; this is
    /// what the worker signs.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut c = Canon(Vec::new());
        let h = &self.header;
        c.bytes(b"rollout-file");
        c.u32(h.schema_version);
        c.bytes(&h.node_address.0);
        c.u64(h.step);
        c.u64(h.submission_index);
        c.u64(self.records.len() as u64);
        for r in &self.records {
            c.bytes(&r.node_address.0);
            c.u64(r.step);
            c.u64(r.submission_index);
            c.u64(r.task_id);
            c.u64(r.checkpoint_version);
            c.u64(r.output_tokens.len() as u64);
            r.output_tokens.iter().for_each(|&t| c.u32(t));
            c.u64(r.chosen_probs.len() as u64);
            r.chosen_probs.iter().for_each(|&p| c.f64(p));
            c.u64(r.commitments.len() as u64);
            r.commitments.iter().for_each(|d| c.bytes(d));
            match r.eos_prob_at_end {
                Some(p) => {
                    c.u32(1);
                    c.f64(p)
                }
                None => c.u32(0),
            }
            c.f64(r.r_task);
            c.f64(r.r_total);
            c.f64(r.advantage);
        }
        c.0
    }

    pub fn sign(&mut self, key: &Keypair) {
        self.header.signature = key.sign(&self.signing_bytes());
    }

    pub fn verify_signature(&self) -> Result<()> {
        self.header.node_address.verify(&self.signing_bytes(), &self.header.signature)
    }

    /// Records split into consecutive groups of `group_size`.
    pub fn groups(&self, group_size: usize) -> core::slice::Chunks<'_, RolloutRecord> {
        self.records.chunks(group_size)
    }
}

pub fn file_id(step: u64, node: &Address, submission_index: u64) -> alloc::string::String {
    alloc::format!("step-{step}/{}-{submission_index}", node.to_hex())
}

/// Sampling stream for a submission, independent of the prompt-selection stream.
pub fn sampling_rng(seed: u64) -> SplitMix64 {
    SplitMix64::new(substream_seed(seed, 0x5a4d_504c))
}

/// Everything a worker does for one submission: select prompts, sample a
/// group per prompt, and sign.
pub fn build_file(
    params: &Policy,
    dataset: &[Task],
    key: &Keypair,
    step: u64,
    submission_index: u64,
    checkpoint_version: u64,
    cfg: &RolloutConfig,
) -> Result<RolloutFile> {
    if dataset.is_empty() {
        return Err(Error::Protocol("empty dataset".into()));
    }
    let node_address = key.address();
    let seed = derive_seed(&node_address, step, submission_index);
    let from = Provenance { node_address, step, submission_index, checkpoint_version };
    let mut rng = sampling_rng(seed);
    let mut records = Vec::with_capacity(cfg.groups_per_file * cfg.group_size);
    for idx in select_prompts(seed, dataset.len(), cfg.groups_per_file) {
        records.extend(generate_group(params, &dataset[idx], cfg, from, &mut rng)?);
    }
    let mut file = RolloutFile {
        header: FileHeader { schema_version: SCHEMA_VERSION, node_address, step, submission_index, signature: [0; 64] },
        records,
    };
    file.sign(key);
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PolicyParams;
    use crate::model::sequence_logprobs;
    use crate::tasks::{generate_dataset, toy_model_config, vocab};

    #[test]
    fn seed_formula() {
        let mut a = [0u8; 32];
        a[0] = 7;
        let addr = Address(a);
        assert_eq!(derive_seed(&addr, 3, 2), 23);
        let other = Keypair::derive("n", 1).address();
        assert_eq!(derive_seed(&other, 0, 5), 5);
    }

    #[test]
    fn prompt_selection_is_a_permutation_prefix() {
        let picks = select_prompts(99, 50, 50);
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(select_prompts(99, 50, 7), picks[..7]);
        assert_eq!(select_prompts(1, 3, 10).len(), 3);
    }

    #[test]
    fn commitment_counts() {
        let h = 3;
        assert_eq!(build_commitments(&alloc::vec![0.1; 5 * h], h, 32).len(), 1);
        assert_eq!(build_commitments(&alloc::vec![0.1; 65 * h], h, 32).len(), 3);
        assert_eq!(build_commitments(&alloc::vec![0.1; 64 * h], h, 32).len(), 2);
        assert!(build_commitments(&[], h, 32).is_empty());
    }

    #[test]
    fn commitment_detects_small_perturbation() {
        let h = 4;
        let base: Vec<f64> = (0..70 * h).map(|i| libm::sin(i as f64)).collect();
        let a = build_commitments(&base, h, 32);
        let mut perturbed = base.clone();
        perturbed[40 * h + 1] += 1e-3;
        let b = build_commitments(&perturbed, h, 32);
        assert_eq!(a[0], b[0]);
        assert_ne!(a[1], b[1]);
        assert_ne!(a[2], b[2]);
    }

    #[test]
    fn sampling_matches_prefill_exactly() {
        let p = Policy::new(PolicyParams::init_random(toy_model_config(), 5, 0.3));
        let task = &generate_dataset(1, 1)[0];
        let mut rng = SplitMix64::new(17);
        let c = sample_completion(&p, &task.prompt_tokens, 1.0, EOS_FLOOR, &mut rng).unwrap();
        let pre = sequence_logprobs(&p, &task.prompt_tokens, &c.output).unwrap();
        assert_eq!(pre.chosen_probs, c.chosen_probs);
        assert_eq!(pre.hidden, c.hidden);
        let again = sample_completion(&p, &task.prompt_tokens, 1.0, EOS_FLOOR, &mut SplitMix64::new(17)).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn eos_is_never_sampled_at_or_below_the_floor() {
        let task = &generate_dataset(1, 1)[0];
        for bias in [-2.0, -1.0, 0.0, 1.0] {
            let mut p = PolicyParams::init_random(toy_model_config(), 8, 0.5);
            p.out_b[vocab::EOS as usize] = bias;
            let p = Policy::new(p);
            let mut rng = SplitMix64::new(bias.to_bits());
            for _ in 0..50 {
                let c = sample_completion(&p, &task.prompt_tokens, 1.0, EOS_FLOOR, &mut rng).unwrap();
                if let Some(q) = c.eos_prob_at_end {
                    assert!(q > EOS_FLOOR, "EOS sampled at {q}");
                }
            }
        }
    }

    #[test]
    fn length_terminated_completion_has_no_eos_prob() {
        // Never emits EOS: give EOS a hugely negative bias.
        let mut p = PolicyParams::zeros(toy_model_config());
        p.out_b[vocab::EOS as usize] = -1e3;
        let p = Policy::new(p);
        let task = &generate_dataset(1, 1)[0];
        let c = sample_completion(&p, &task.prompt_tokens, 1.0, EOS_FLOOR, &mut SplitMix64::new(3)).unwrap();
        assert_eq!(c.output.len() + task.prompt_tokens.len(), p.config.max_len);
        assert_eq!(c.eos_prob_at_end, None);
    }

    #[test]
    fn all_wrong_group_has_zero_advantages() {
        let mut p = PolicyParams::zeros(toy_model_config());
        p.out_b[vocab::EOS as usize] = 50.0;
        let p = Policy::new(p);
        let task = &generate_dataset(2, 1)[0];
        let from = Provenance { node_address: Keypair::derive("n", 0).address(), step: 0, submission_index: 0, checkpoint_version: 0 };
        let g = generate_group(&p, task, &RolloutConfig::default(), from, &mut SplitMix64::new(1)).unwrap();
        assert_eq!(g.len(), 8);
        assert!(g.iter().all(|r| r.r_task == 0.0 && r.advantage == 0.0));
    }

    #[test]
    fn signed_file_verifies_and_detects_tampering() {
        let p = Policy::new(PolicyParams::init_random(toy_model_config(), 5, 0.3));
        let data = generate_dataset(4, 20);
        let key = Keypair::derive("w", 0);
        let cfg = RolloutConfig { groups_per_file: 2, group_size: 2, ..Default::default() };
        let mut f = build_file(&p, &data, &key, 3, 1, 3, &cfg).unwrap();
        assert_eq!(f.records.len(), 4);
        assert!(f.verify_signature().is_ok());
        f.records[0].r_total += 1.0;
        assert!(f.verify_signature().is_err());
    }
}
