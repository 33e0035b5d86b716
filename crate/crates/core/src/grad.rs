//! Analytic gradient of the token-level GRPO loss, global-norm clipping and
//! the SGD update.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grpo::{grpo_objective, token_term, ObjectiveStats, TrainConfig};
use crate::model::{entropy, Activations, ModelConfig, Policy, PolicyParams, TokenId};

/// One completion prepared for an optimizer step. `old_logp` and `ref_logp`
/// are constants of the step; `advantage` is broadcast to every token.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub prompt: Vec<TokenId>,
    pub output: Vec<TokenId>,
    pub advantage: f64,
    pub old_logp: Vec<f64>,
    pub ref_logp: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GradientOutput {
    /// Clipped gradient, laid out like the parameters.
    pub grads: PolicyParams,
    pub pre_clip_norm: f64,
    pub stats: ObjectiveStats,
}

/// Accumulates `∂L/∂θ` over many forward passes. First-layer gradients are
/// gathered per `(slot, token)` and expanded once in [`Accumulator::finish`].
pub(crate) struct Accumulator {
    grads: PolicyParams,
    slot_tok: Vec<f64>,
    touched: Vec<bool>,
    g_pre: Vec<f64>,
}

impl Accumulator {
    pub(crate) fn new(config: ModelConfig) -> Self {
        let (w, v, h) = (config.window, config.vocab, config.hidden_dim);
        Self {
            grads: PolicyParams::zeros(config),
            slot_tok: alloc::vec![0.0; w * v * h],
            touched: alloc::vec![false; w * v],
            g_pre: alloc::vec![0.0; h],
        }
    }

    /// Adds the contribution of one pass given `∂L/∂logits`.
    pub(crate) fn add(&mut self, params: &PolicyParams, act: &Activations, g_logit: &[f64]) {
        let c = &params.config;
        let (h_dim, v) = (c.hidden_dim, c.vocab);
        let grads = &mut self.grads;
        for (gb, &g) in grads.out_b.iter_mut().zip(g_logit) {
            *gb += g;
        }
        for h in 0..h_dim {
            let a = act.hidden[h];
            let row = &params.out_w[h * v..(h + 1) * v];
            let grow = &mut grads.out_w[h * v..(h + 1) * v];
            let mut gh = 0.0;
            for j in 0..v {
                grow[j] += a * g_logit[j];
                gh += row[j] * g_logit[j];
            }
            self.g_pre[h] = gh * (1.0 - a * a);
        }
        for (gb, &g) in grads.hidden_b.iter_mut().zip(&self.g_pre) {
            *gb += g;
        }
        for (slot, &tok) in act.window.iter().enumerate() {
            let cell = slot * v + tok as usize;
            self.touched[cell] = true;
            for (acc, &g) in self.slot_tok[cell * h_dim..(cell + 1) * h_dim].iter_mut().zip(&self.g_pre) {
                *acc += g;
            }
        }
    }

    pub(crate) fn finish(mut self, params: &PolicyParams) -> PolicyParams {
        let c = &params.config;
        let (e_dim, h_dim, v) = (c.embed_dim, c.hidden_dim, c.vocab);
        for (cell, _) in self.touched.iter().enumerate().filter(|(_, &t)| t) {
            let (slot, tok) = (cell / v, cell % v);
            let g = &self.slot_tok[cell * h_dim..(cell + 1) * h_dim];
            for e in 0..e_dim {
                let x = params.embed[tok * e_dim + e];
                let base = (slot * e_dim + e) * h_dim;
                let row = &params.hidden_w[base..base + h_dim];
                let grow = &mut self.grads.hidden_w[base..base + h_dim];
                let mut ge = 0.0;
                for h in 0..h_dim {
                    grow[h] += x * g[h];
                    ge += row[h] * g[h];
                }
                self.grads.embed[tok * e_dim + e] += ge;
            }
        }
        self.grads
    }
}

/// Gradient of the loss computed by [`grpo_objective`] over `batch`,
/// clipped to a global norm of `cfg.grad_clip`.
pub fn gradient(params: &Policy, batch: &[SequenceSample], cfg: &TrainConfig) -> Result<GradientOutput> {
    if batch.is_empty() {
        return Err(crate::error::invalid("empty batch"));
    }
    let total: usize = batch.iter().map(|s| s.output.len()).sum();
    let mut acts = Vec::with_capacity(total);
    let (mut new_lp, mut old_lp, mut ref_lp, mut adv, mut ent) =
        (Vec::with_capacity(total), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut chosen = Vec::with_capacity(total);
    for s in batch {
        if s.old_logp.len() != s.output.len() || s.ref_logp.len() != s.output.len() {
            return Err(crate::error::invalid("log-prob length mismatch"));
        }
        let mut history = s.prompt.clone();
        for (t, &tok) in s.output.iter().enumerate() {
            let act = params.forward_history(&history)?;
            new_lp.push(libm::log(act.probs[tok as usize]));
            ent.push(entropy(&act.probs));
            old_lp.push(s.old_logp[t]);
            ref_lp.push(s.ref_logp[t]);
            adv.push(s.advantage);
            chosen.push(tok as usize);
            acts.push(act);
            history.push(tok);
        }
    }
    let stats = grpo_objective(&new_lp, &old_lp, &ref_lp, &adv, &ent, cfg)?;
    let mut acc = Accumulator::new(params.config);
    let n = total.max(1) as f64;
    let mut g_logit = alloc::vec![0.0; params.config.vocab];
    for (i, act) in acts.iter().enumerate() {
        let term = token_term(new_lp[i], old_lp[i], adv[i], cfg.epsilon, cfg.delta);
        let d_term = if term.clipped { 0.0 } else { term.ratio * adv[i] };
        let x = ref_lp[i] - new_lp[i];
        let d_kl = 1.0 - libm::exp(x);
        // ∂L/∂ln π(chosen)
        let c_lp = (-d_term + cfg.kl_coef * d_kl) / n;
        // ∂L/∂H
        let c_h = -cfg.entropy_coef / n;
        let h = ent[i];
        for (j, g) in g_logit.iter_mut().enumerate() {
            let p = act.probs[j];
            let onehot = if j == chosen[i] { 1.0 } else { 0.0 };
            let d_ent = if p > 0.0 { -p * (libm::log(p) + h) } else { 0.0 };
            *g = c_lp * (onehot - p) + c_h * d_ent;
        }
        acc.add(params, act, &g_logit);
    }
    let mut grads = acc.finish(params);
    let pre_clip_norm = clip_global_norm(&mut grads, cfg.grad_clip)?;
    Ok(GradientOutput { grads, pre_clip_norm, stats })
}

/// Scales `grads` down to norm `max_norm` if it exceeds it; returns the
/// pre-clip norm.
pub fn clip_global_norm(grads: &mut PolicyParams, max_norm: f64) -> Result<f64> {
    let norm = grads.norm();
    if !norm.is_finite() {
        return Err(Error::Numeric("gradient"));
    }
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    Ok(norm)
}

/// `θ ← θ − lr · g`.
pub fn sgd_step(params: &mut PolicyParams, grads: &PolicyParams, lr: f64) -> Result<()> {
    params.add_scaled(grads, -lr);
    if !params.is_finite() {
        return Err(Error::Numeric("parameters"));
    }
    Ok(())
}
