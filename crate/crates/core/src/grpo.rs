//! GRPO mathematics: group advantages, the two-sided clipped token objective,
//! and the auxiliary KL and entropy terms.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// How group rewards become advantages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdvantageMode {
    /// `(r - mean) / (std + adv_eps)` with the population std.
    #[default]
    MeanStd,
    /// `r - mean`, no std normalisation.
    MeanOnly,
}

/// Which policy the KL term is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlReference {
    /// The policy the run started from.
    #[default]
    Initial,
    /// The checkpoint the current step started from.
    LastCheckpoint,
}

/// When the trainer recomputes the "old" log-probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OldLogProbMode {
    /// Once per rollout step, with the params at the start of the step.
    #[default]
    PerStep,
    /// Before every optimizer micro-step.
    PerMicroStep,
}

/// Every tunable of the optimisation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epsilon: f64,
    /// Upper bound on the ratio for negative advantages; `f64::INFINITY`
    /// disables it and recovers the one-sided objective.
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
    pub async_level: u64,
    pub adv_eps: f64,
    pub adv_mode: AdvantageMode,
    pub kl_reference: KlReference,
    pub old_logp_mode: OldLogProbMode,
}

impl TrainConfig {
    /// Desk-scale preset.
    pub fn toy() -> Self {
        Self {
            epsilon: 0.2,
            delta: 4.0,
            alpha: 0.01,
            kl_coef: 0.001,
            entropy_coef: 1e-4,
            lr: 0.5,
            warmup_steps: 10,
            grad_clip: 1.0,
            group_size: 8,
            prompts_per_step: 16,
            micro_steps: 4,
            async_level: 2,
            adv_eps: 1e-6,
            adv_mode: AdvantageMode::MeanStd,
            kl_reference: KlReference::Initial,
            old_logp_mode: OldLogProbMode::PerStep,
        }
    }

    /// The hyperparameters of the large 32B run, kept for reference.
    pub fn large() -> Self {
        Self {
            alpha: 0.0003,
            lr: 3e-7,
            warmup_steps: 25,
            grad_clip: 0.1,
            group_size: 16,
            prompts_per_step: 256,
            micro_steps: 8,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if !(self.delta > 1.0 + self.epsilon) {
            return bad("delta must exceed 1 + epsilon");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be non-negative");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if self.prompts_per_step == 0 || self.micro_steps == 0 {
            return bad("prompts_per_step and micro_steps must be positive");
        }
        if !(self.lr > 0.0) || !(self.adv_eps >= 0.0) {
            return bad("lr must be positive and adv_eps non-negative");
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` (0-based) under linear warmup.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Group-relative advantages. Identical rewards short-circuit to exact zeros.
pub fn compute_advantages(rewards: &[f64], adv_eps: f64, mode: AdvantageMode) -> Vec<f64> {
    let n = rewards.len() as f64;
    if rewards.windows(2).all(|w| w[0] == w[1]) {
        return alloc::vec![0.0; rewards.len()];
    }
    let mean = rewards.iter().sum::<f64>() / n;
    match mode {
        AdvantageMode::MeanOnly => rewards.iter().map(|r| r - mean).collect(),
        AdvantageMode::MeanStd => {
            let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
            let denom = libm::sqrt(var) + adv_eps;
            rewards.iter().map(|r| (r - mean) / denom).collect()
        }
    }
}

/// Largest magnitude a mean/std advantage can take in a group of `g`.
pub fn advantage_bound(group_size: usize) -> f64 {
    libm::sqrt(group_size as f64)
}

/// Non-negative per-token KL estimate `e^x − x − 1`, `x = ref − new`.
pub fn kl_estimate(new_logp: f64, ref_logp: f64) -> f64 {
    let x = ref_logp - new_logp;
    (libm::expm1(x) - x).max(0.0)
}

/// One token's contribution to the clipped objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenTerm {
    pub ratio: f64,
    pub value: f64,
    /// Whether clipping or the δ bound replaced `ratio · adv`.
    pub clipped: bool,
}

/// `min(min(ρ, δ)·Â, clip(ρ, 1−ε, 1+ε)·Â)` with `ρ = exp(new − old)`.
pub fn token_term(new_logp: f64, old_logp: f64, adv: f64, epsilon: f64, delta: f64) -> TokenTerm {
    let ratio = libm::exp(new_logp - old_logp);
    let bounded = ratio.min(delta) * adv;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * adv;
    let value = bounded.min(clipped);
    TokenTerm { ratio, value, clipped: value != ratio * adv }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveStats {
    pub loss: f64,
    /// `−mean(term)`, the policy part of `loss`.
    pub policy_loss: f64,
    pub clip_fraction: f64,
    pub mean_entropy: f64,
    pub mean_kl: f64,
}

/// Token-level GRPO loss over a whole rollout batch.
///
/// `loss = −Σ terms / N + kl_coef · mean(KL) − entropy_coef · mean(H)`, where
/// `N` counts every token in the batch. `entropy` holds the per-token entropy
/// of the current policy.
pub fn grpo_objective(
    new_logp: &[f64],
    old_logp: &[f64],
    ref_logp: &[f64],
    adv: &[f64],
    entropy: &[f64],
    cfg: &TrainConfig,
) -> Result<ObjectiveStats> {
    let n = new_logp.len();
    if old_logp.len() != n || ref_logp.len() != n || adv.len() != n || entropy.len() != n {
        return Err(crate::error::invalid("misaligned token tensors"));
    }
    if n == 0 {
        return Ok(ObjectiveStats::default());
    }
    let inputs = [new_logp, old_logp, ref_logp, adv, entropy];
    if inputs.iter().any(|xs| xs.iter().any(|x| !x.is_finite())) {
        return Err(Error::Numeric("objective inputs"));
    }
    let (mut sum, mut clipped, mut kl, mut ent) = (0.0, 0usize, 0.0, 0.0);
    for i in 0..n {
        let t = token_term(new_logp[i], old_logp[i], adv[i], cfg.epsilon, cfg.delta);
        sum += t.value;
        clipped += t.clipped as usize;
        kl += kl_estimate(new_logp[i], ref_logp[i]);
        ent += entropy[i];
    }
    let nf = n as f64;
    let policy_loss = -sum / nf;
    let stats = ObjectiveStats {
        loss: policy_loss + cfg.kl_coef * kl / nf - cfg.entropy_coef * ent / nf,
        policy_loss,
        clip_fraction: clipped as f64 / nf,
        mean_entropy: ent / nf,
        mean_kl: kl / nf,
    };
    if !stats.loss.is_finite() {
        return Err(Error::Numeric("objective"));
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(eps: f64, delta: f64) -> TrainConfig {
        TrainConfig { epsilon: eps, delta, kl_coef: 0.0, entropy_coef: 0.0, ..TrainConfig::toy() }
    }

    #[test]
    fn advantages_of_identical_rewards_are_zero() {
        assert_eq!(compute_advantages(&[1.0; 4], 1e-6, AdvantageMode::MeanStd), [0.0; 4]);
    }

    #[test]
    fn advantages_hand_values() {
        let a = compute_advantages(&[1.0, 0.0], 0.0, AdvantageMode::MeanStd);
        assert_eq!(a, [1.0, -1.0]);
        // mean 1/4, population std √3/4.
        let a = compute_advantages(&[1.0, 0.0, 0.0, 0.0], 0.0, AdvantageMode::MeanStd);
        let s3 = libm::sqrt(3.0);
        for (got, want) in a.iter().zip([s3, -1.0 / s3, -1.0 / s3, -1.0 / s3]) {
            assert!((got - want).abs() < 1e-12);
        }
        let a = compute_advantages(&[1.0, 0.0], 0.0, AdvantageMode::MeanOnly);
        assert_eq!(a, [0.5, -0.5]);
    }

    #[test]
    fn kl_hand_values() {
        assert_eq!(kl_estimate(-1.3, -1.3), 0.0);
        let k = kl_estimate(0.0, libm::log(2.0));
        assert!((k - (1.0 - libm::log(2.0))).abs() < 1e-15);
        assert!((k - 0.306_852_819_440_054_3).abs() < 1e-12);
    }

    #[test]
    fn delta_bounds_large_ratio_with_negative_advantage() {
        let t = token_term(libm::log(10.0), 0.0, -1.0, 0.2, 4.0);
        assert_eq!(t.value, -4.0);
        assert!(t.clipped);
        let t = token_term(libm::log(10.0), 0.0, -1.0, 0.2, f64::INFINITY);
        assert!((t.value + 10.0).abs() < 1e-12);
        assert!(!t.clipped);
    }

    #[test]
    fn positive_advantage_clips_at_one_plus_eps() {
        let t = token_term(libm::log(1.5), 0.0, 1.0, 0.2, 4.0);
        assert_eq!(t.value, 1.2);
    }

    #[test]
    fn identity_ratio_gives_minus_mean_advantage() {
        let adv = [0.5, -1.0, 2.0];
        let lp = [-1.0, -2.0, -0.5];
        let s = grpo_objective(&lp, &lp, &lp, &adv, &[0.0; 3], &cfg(0.2, 4.0)).unwrap();
        assert!((s.loss + 0.5).abs() < 1e-15);
        assert_eq!(s.clip_fraction, 0.0);
    }

    #[test]
    fn non_finite_inputs_are_numeric_errors() {
        let r = grpo_objective(&[f64::NAN], &[0.0], &[0.0], &[1.0], &[0.0], &cfg(0.2, 4.0));
        assert_eq!(r, Err(Error::Numeric("objective inputs")));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::toy().validate().is_ok());
        assert!(TrainConfig::large().validate().is_ok());
        assert!(TrainConfig { delta: 1.1, ..TrainConfig::toy() }.validate().is_err());
        assert!(TrainConfig { group_size: 1, ..TrainConfig::toy() }.validate().is_err());
        assert!(TrainConfig { epsilon: 1.0, ..TrainConfig::toy() }.validate().is_err());
    }

    #[test]
    fn warmup_is_linear() {
        let c = TrainConfig { lr: 1.0, warmup_steps: 4, ..TrainConfig::toy() };
        assert_eq!([c.lr_at(0), c.lr_at(1), c.lr_at(3), c.lr_at(10)], [0.25, 0.5, 1.0, 1.0]);
    }

    fn batch() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
        prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -2.5f64..2.5), 1..40)
    }

    proptest! {
        #[test]
        fn delta_bound_holds(tokens in batch(), eps in 0.05f64..0.5, extra in 0.1f64..5.0) {
            let delta = 1.0 + eps + extra;
            for (new, old, adv) in tokens {
                let t = token_term(new, old, adv, eps, delta);
                if adv < 0.0 {
                    prop_assert!(t.value >= delta * adv - 1e-12);
                } else {
                    prop_assert!(t.value <= (1.0 + eps) * adv + 1e-12);
                }
            }
        }

        #[test]
        fn infinite_delta_is_standard_grpo(tokens in batch(), eps in 0.05f64..0.5) {
            for (new, old, adv) in tokens {
                let r = libm::exp(new - old);
                let standard = (r * adv).min(r.clamp(1.0 - eps, 1.0 + eps) * adv);
                prop_assert_eq!(token_term(new, old, adv, eps, f64::INFINITY).value, standard);
            }
        }

        #[test]
        fn clip_fraction_shrinks_as_epsilon_grows(tokens in batch(), e1 in 0.05f64..0.9, e2 in 0.05f64..0.9) {
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let new: Vec<f64> = tokens.iter().map(|t| t.0).collect();
            let old: Vec<f64> = tokens.iter().map(|t| t.1).collect();
            let adv: Vec<f64> = tokens.iter().map(|t| t.2).collect();
            let z = alloc::vec![0.0; new.len()];
            let a = grpo_objective(&new, &old, &new, &adv, &z, &cfg(lo, 10.0)).unwrap();
            let b = grpo_objective(&new, &old, &new, &adv, &z, &cfg(hi, 10.0)).unwrap();
            prop_assert!((0.0..=1.0).contains(&a.clip_fraction));
            prop_assert!(b.clip_fraction <= a.clip_fraction);
        }

        #[test]
        fn advantages_are_centred(rewards in prop::collection::vec(-2.0f64..2.0, 2..20)) {
            let a = compute_advantages(&rewards, 1e-6, AdvantageMode::MeanStd);
            let mean = a.iter().sum::<f64>() / a.len() as f64;
            prop_assert!(mean.abs() <= 1e-9);
            prop_assert!(a.iter().all(|x| x.abs() < advantage_bound(rewards.len())));
        }

        #[test]
        fn kl_is_non_negative(new in -20.0f64..20.0, r in -20.0f64..20.0) {
            prop_assert!(kl_estimate(new, r) >= 0.0);
        }
    }
}
