//! Supervised warm start of the base policy.
//!
//! RL needs a starting policy that already produces well-formed completions
//! and occasionally the right answer. The base policy is fitted by soft-target
//! cross-entropy to this completion process:
//!
//! - reasoning restates the problem `a op b =` for `c` cycles, with `c`
//!   uniform on `0..=max_cycles` regardless of the budget token;
//! - then `DELIM`, the answer digit, and `EOS`. The answer is correct for a
//!   fixed pseudo-random subset of problems (a fraction `known_fraction` of
//!   all `(a, op, b)`); for every other problem it is uniform over digits.
//!
//! The resulting policy follows the format, ignores its thinking budget, and
//! is at chance on the problems it does not know. Offline filtering keeps
//! mostly those, so RL has to teach both budget adherence and answers.

use alloc::vec::Vec;

use crate::grad::Accumulator;
use crate::model::{ModelConfig, Policy, PolicyParams, TokenId};
use crate::rng::SplitMix64;
use crate::tasks::{vocab, Op, BUDGETS, PROMPT_LEN};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub known_fraction: f64,
    /// Extra answer-position examples per batch.
    pub answer_batch: usize,
    pub max_cycles: usize,
    pub init_scale: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { seed: 0, steps: 1000, batch: 32, lr: 3e-3, known_fraction: 0.4, answer_batch: 64, max_cycles: 8, init_scale: 0.1 }
    }
}

/// One supervised position: the history and the target next-token law.
struct Example {
    history: Vec<TokenId>,
    target: Vec<(TokenId, f64)>,
}

fn training_sequence(rng: &mut SplitMix64, cfg: &PretrainConfig) -> Vec<Example> {
    let a = rng.below(10) as TokenId;
    let op = Op::ALL[rng.below(3) as usize];
    let b = rng.below(10) as TokenId;
    let budget = vocab::BUDGET_BASE + rng.below(BUDGETS.len() as u64) as TokenId;
    let cycles = rng.below(cfg.max_cycles as u64 + 1) as usize;
    let answer = op.apply_mod10(a, b);
    let restated = [a, op.token(), b, vocab::EQUALS];

    let mut history: Vec<TokenId> = alloc::vec![budget, a, op.token(), b, vocab::EQUALS];
    let mut out = Vec::new();
    for i in 0..=cycles {
        // Stop with the hazard that makes the cycle count uniform.
        let stop = 1.0 / (cfg.max_cycles + 1 - i) as f64;
        let target = if stop >= 1.0 {
            alloc::vec![(vocab::DELIM, 1.0)]
        } else {
            alloc::vec![(vocab::DELIM, stop), (a, 1.0 - stop)]
        };
        out.push(Example { history: history.clone(), target });
        if i == cycles {
            break;
        }
        for (k, &t) in restated.iter().enumerate() {
            if k > 0 {
                out.push(Example { history: history.clone(), target: alloc::vec![(t, 1.0)] });
            }
            history.push(t);
        }
    }
    history.push(vocab::DELIM);
    let answer_law = if knows(cfg, a, op, b) {
        alloc::vec![(answer, 1.0)]
    } else {
        (0..10).map(|d| (d, 0.1)).collect()
    };
    out.push(Example { history: history.clone(), target: answer_law });
    history.push(answer);
    out.push(Example { history, target: alloc::vec![(vocab::EOS, 1.0)] });
    out
}

/// Whether the base policy is taught the right answer for `a op b`.
pub fn knows(cfg: &PretrainConfig, a: u32, op: Op, b: u32) -> bool {
    let key = (a as u64) * 100 + (op.token() as u64) * 10 + b as u64;
    let u = crate::rng::mix64(crate::rng::substream_seed(cfg.seed, key)) >> 11;
    (u as f64) * (1.0 / (1u64 << 53) as f64) < cfg.known_fraction
}

struct Adam {
    m: PolicyParams,
    v: PolicyParams,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut PolicyParams, g: &PolicyParams, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - libm::pow(B1, self.t as f64);
        let c2 = 1.0 - libm::pow(B2, self.t as f64);
        for (((p, m), v), &g) in params.iter_mut().zip(self.m.iter_mut()).zip(self.v.iter_mut()).zip(g.iter()) {
            *m = B1 * *m + (1.0 - B1) * g;
            *v = B2 * *v + (1.0 - B2) * g * g;
            *p -= lr * (*m / c1) / (libm::sqrt(*v / c2) + 1e-8);
        }
    }
}

/// Fits the base policy. Deterministic in `cfg.seed`.
pub fn pretrain_base(model: ModelConfig, cfg: &PretrainConfig) -> Result<PolicyParams> {
    debug_assert!(model.max_len >= PROMPT_LEN + 4 * cfg.max_cycles + 3);
    let mut params = PolicyParams::init_random(model, cfg.seed, cfg.init_scale);
    let mut adam = Adam { m: PolicyParams::zeros(model), v: PolicyParams::zeros(model), t: 0 };
    let mut rng = SplitMix64::new(cfg.seed ^ 0x7072_6574_7261_696e);
    let mut g_logit = alloc::vec![0.0; model.vocab];
    for _ in 0..cfg.steps {
        let policy = Policy::new(params);
        let mut acc = Accumulator::new(model);
        let mut examples: Vec<Example> = (0..cfg.batch).flat_map(|_| training_sequence(&mut rng, cfg)).collect();
        for _ in 0..cfg.answer_batch {
            let mut seq = training_sequence(&mut rng, cfg);
            seq.pop();
            examples.extend(seq.pop());
        }
        let n = examples.len() as f64;
        for ex in &examples {
            let act = policy.forward_history(&ex.history)?;
            for (g, &p) in g_logit.iter_mut().zip(&act.probs) {
                *g = p / n;
            }
            for &(t, q) in &ex.target {
                g_logit[t as usize] -= q / n;
            }
            acc.add(&policy, &act, &g_logit);
        }
        let grads = acc.finish(&policy);
        params = policy.into_params();
        adam.step(&mut params, &grads, cfg.lr);
    }
    if !params.is_finite() {
        return Err(crate::Error::Numeric("pretraining"));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_sequences_are_well_formed() {
        let cfg = PretrainConfig::default();
        let mut rng = SplitMix64::new(1);
        for _ in 0..50 {
            let seq = training_sequence(&mut rng, &cfg);
            let last = seq.last().unwrap();
            assert_eq!(last.target, [(vocab::EOS, 1.0)]);
            assert!(last.history.len() <= crate::tasks::toy_model_config().max_len);
            for ex in &seq {
                let mass: f64 = ex.target.iter().map(|t| t.1).sum();
                assert!((mass - 1.0).abs() < 1e-12);
            }
        }
    }
}
