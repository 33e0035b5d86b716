//! Verifiable toy tasks: single-digit modular arithmetic with a thinking
//! budget, binary correctness rewards, length rewards and pass@k difficulty
//! filtering.
//!
//! Token layout of a prompt: `[BUDGET_b, a, op, b, EQUALS]`. A well-formed
//! completion is any reasoning span, then `DELIM`, then the answer digit,
//! then `EOS`.

use alloc::vec;
use alloc::vec::Vec;

use crate::model::{ModelConfig, Policy, TokenId};
use crate::rng::{substream_seed, SplitMix64};

pub mod vocab {
    use crate::model::TokenId;

    /// Digits occupy ids `0..=9`.
    pub const PLUS: TokenId = 10;
    pub const MINUS: TokenId = 11;
    pub const TIMES: TokenId = 12;
    pub const EQUALS: TokenId = 13;
    /// Ends the reasoning span; the answer follows.
    pub const DELIM: TokenId = 14;
    pub const EOS: TokenId = 15;
    pub const PAD: TokenId = 16;
    /// Budget tokens `17..=20` stand for the budgets in [`super::BUDGETS`].
    pub const BUDGET_BASE: TokenId = 17;
    pub const SIZE: usize = 21;

    pub fn is_digit(t: TokenId) -> bool {
        t < 10
    }
}

/// Thinking budgets, in tokens.
pub const BUDGETS: [u32; 4] = [8, 16, 24, 32];
pub const PROMPT_LEN: usize = 5;

/// Model shape used for the arithmetic tasks.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        vocab: vocab::SIZE,
        window: 40,
        embed_dim: 8,
        hidden_dim: 128,
        max_len: 48,
        eos_id: vocab::EOS,
        pad_id: vocab::PAD,
    }
}

pub fn budget_token(l_target: u32) -> Option<TokenId> {
    BUDGETS.iter().position(|&b| b == l_target).map(|i| vocab::BUDGET_BASE + i as TokenId)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    pub const ALL: [Op; 3] = [Op::Add, Op::Sub, Op::Mul];

    pub fn token(self) -> TokenId {
        match self {
            Op::Add => vocab::PLUS,
            Op::Sub => vocab::MINUS,
            Op::Mul => vocab::TIMES,
        }
    }

    pub fn apply_mod10(self, a: u32, b: u32) -> u32 {
        match self {
            Op::Add => (a + b) % 10,
            Op::Sub => (a + 10 - b) % 10,
            Op::Mul => (a * b) % 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub task_id: u64,
    pub prompt_tokens: Vec<TokenId>,
    pub target_answer: Vec<TokenId>,
    pub l_target: u32,
}

impl Task {
    /// `a op b mod 10` with thinking budget `l_target`; `l_target` must be one
    /// of [`BUDGETS`].
    pub fn arithmetic(task_id: u64, a: u32, op: Op, b: u32, l_target: u32) -> Self {
        let budget = budget_token(l_target).expect("l_target must be a configured budget");
        Self {
            task_id,
            prompt_tokens: vec![budget, a, op.token(), b, vocab::EQUALS],
            target_answer: vec![op.apply_mod10(a, b)],
            l_target,
        }
    }
}

/// `n` tasks drawn from `seed`; task ids are `0..n`.
pub fn generate_dataset(seed: u64, n: usize) -> Vec<Task> {
    let mut rng = SplitMix64::new(seed);
    (0..n as u64)
        .map(|id| {
            let a = rng.below(10) as u32;
            let op = Op::ALL[rng.below(3) as usize];
            let b = rng.below(10) as u32;
            let l_target = BUDGETS[rng.below(BUDGETS.len() as u64) as usize];
            Task::arithmetic(id, a, op, b, l_target)
        })
        .collect()
}

/// A binary reward function over completions.
pub trait Verifier {
    fn verify(&self, task: &Task, output: &[TokenId]) -> u8;
}

/// Exact match of the span between the first `DELIM` and the terminating
/// `EOS` (or the end of output).
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactAnswer;

impl Verifier for ExactAnswer {
    fn verify(&self, task: &Task, output: &[TokenId]) -> u8 {
        let Some(delim) = output.iter().position(|&t| t == vocab::DELIM) else {
            return 0;
        };
        let rest = &output[delim + 1..];
        let span = match rest.iter().position(|&t| t == vocab::EOS) {
            Some(end) if end + 1 == rest.len() => &rest[..end],
            Some(_) => return 0,
            None => rest,
        };
        (span == task.target_answer.as_slice()) as u8
    }
}

pub fn verify(task: &Task, output: &[TokenId]) -> u8 {
    ExactAnswer.verify(task, output)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown {
    pub r_task: f64,
    pub length_penalty: f64,
    pub r_total: f64,
}

/// `r_total = r_task − α·|l_target − l_y|` with `l_y = len(output)`.
pub fn total_reward(task: &Task, output: &[TokenId], alpha: f64) -> RewardBreakdown {
    let r_task = verify(task, output) as f64;
    let deviation = (task.l_target as f64 - output.len() as f64).abs();
    let length_penalty = alpha * deviation;
    RewardBreakdown { r_task, length_penalty, r_total: r_task - length_penalty }
}

/// Per-task seed for the pass@k estimate.
pub fn filter_seed(seed: u64, task_id: u64) -> u64 {
    substream_seed(seed, task_id)
}

/// Keeps tasks whose pass count `c` over `k` samples satisfies
/// `low·k ≤ c ≤ high·k`. `sample` produces one completion from the reference
/// policy using the supplied generator, which is seeded per task with
/// [`filter_seed`] and shared by the task's `k` draws.
pub fn offline_filter_with<F>(dataset: &[Task], k: usize, low: f64, high: f64, seed: u64, mut sample: F) -> Vec<Task>
where
    F: FnMut(&Task, &mut SplitMix64) -> Vec<TokenId>,
{
    let (lo, hi) = (low * k as f64, high * k as f64);
    dataset
        .iter()
        .filter(|task| {
            let mut rng = SplitMix64::new(filter_seed(seed, task.task_id));
            let c = (0..k).map(|_| verify(task, &sample(task, &mut rng)) as usize).sum::<usize>() as f64;
            lo <= c && c <= hi
        })
        .cloned()
        .collect()
}

/// [`offline_filter_with`] using temperature-1 samples from `params`.
pub fn offline_filter(dataset: &[Task], params: &Policy, k: usize, low: f64, high: f64, seed: u64) -> Vec<Task> {
    offline_filter_with(dataset, k, low, high, seed, |task, rng| {
        crate::rollout::sample_completion(params, &task.prompt_tokens, 1.0, crate::rollout::EOS_FLOOR, rng)
            .map(|c| c.output)
            .unwrap_or_default()
    })
}

#[cfg(test)]
mod tests {
    use super::vocab::*;
    use super::*;

    #[test]
    fn dataset_is_deterministic_and_ids_unique() {
        assert_eq!(generate_dataset(1, 5), generate_dataset(1, 5));
        assert_ne!(generate_dataset(1, 5), generate_dataset(2, 5));
        let d = generate_dataset(7, 1000);
        let mut ids: Vec<u64> = d.iter().map(|t| t.task_id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 1000);
        assert!(d.iter().all(|t| BUDGETS.contains(&t.l_target)));
    }

    #[test]
    fn arithmetic_answers() {
        assert_eq!(Task::arithmetic(0, 3, Op::Add, 4, 8).target_answer, [7]);
        assert_eq!(Task::arithmetic(0, 3, Op::Sub, 4, 8).target_answer, [9]);
        assert_eq!(Task::arithmetic(0, 7, Op::Mul, 8, 8).target_answer, [6]);
    }

    #[test]
    fn verifier_cases() {
        let t = Task::arithmetic(0, 3, Op::Add, 4, 8);
        assert_eq!(verify(&t, &[3, PLUS, 4, DELIM, 7, EOS]), 1);
        assert_eq!(verify(&t, &[DELIM, 7]), 1);
        assert_eq!(verify(&t, &[]), 0);
        assert_eq!(verify(&t, &[7, EOS]), 0);
        assert_eq!(verify(&t, &[3, PLUS, 4, EQUALS, 7]), 0);
        assert_eq!(verify(&t, &[DELIM, 7, 7, EOS]), 0);
        assert_eq!(verify(&t, &[DELIM, 7, EOS, 7]), 0);
        assert_eq!(verify(&t, &[DELIM, EOS]), 0);
        assert_eq!(verify(&t, &[DELIM, 6, EOS]), 0);
    }

    #[test]
    fn total_reward_examples() {
        let mut t = Task::arithmetic(0, 1, Op::Add, 1, 8);
        t.l_target = 2000;
        let mut out = vec![0; 2997];
        out.extend([DELIM, 2, EOS]);
        let r = total_reward(&t, &out, 0.0003);
        assert_eq!(r.r_task, 1.0);
        assert!((r.r_total - 0.7).abs() < 1e-12);

        let t = Task::arithmetic(0, 1, Op::Add, 1, 8);
        let out = [0, 0, 0, 0, 0, DELIM, 2, EOS];
        assert_eq!(total_reward(&t, &out, 0.5).r_total, 1.0);
        assert_eq!(total_reward(&t, &[DELIM, 2, EOS], 0.0).r_total, 1.0);
    }

    #[test]
    fn filter_bounds_are_inclusive() {
        let d = generate_dataset(3, 40);
        // Sampler that solves task i exactly (i mod 9) times out of 8.
        let mut calls = alloc::collections::BTreeMap::new();
        let kept = offline_filter_with(&d, 8, 0.125, 0.5, 11, |task, _| {
            let n = calls.entry(task.task_id).or_insert(0u64);
            *n += 1;
            if *n <= task.task_id % 9 {
                let mut o = vec![DELIM];
                o.extend(&task.target_answer);
                o
            } else {
                vec![]
            }
        });
        assert!(kept.iter().all(|t| (1..=4).contains(&(t.task_id % 9))));
        assert_eq!(kept.len(), d.iter().filter(|t| (1..=4).contains(&(t.task_id % 9))).count());
        let all = offline_filter_with(&d, 8, 0.0, 1.0, 11, |_, _| vec![]);
        assert_eq!(all, d);
    }
}
