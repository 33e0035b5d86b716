//! Finite-difference check of the analytic GRPO gradient against a loss
//! computed from scratch with a naive forward pass.

use swarm_core::grad::{gradient, SequenceSample};
use swarm_core::grpo::TrainConfig;
use swarm_core::{ModelConfig, Policy, PolicyParams, SplitMix64, TokenId};

pub const INSTANCES: usize = 120;
pub const REL_TOL: f64 = 1e-4;

/// Next-token probabilities, written out directly from the layer equations.
fn naive_probs(p: &PolicyParams, history: &[TokenId]) -> Vec<f64> {
    let c = &p.config;
    let (v, w, e, h) = (c.vocab, c.window, c.embed_dim, c.hidden_dim);
    let mut window = vec![c.pad_id; w];
    let take = history.len().min(w);
    window[w - take..].copy_from_slice(&history[history.len() - take..]);
    let mut x = Vec::with_capacity(w * e);
    for &t in &window {
        x.extend_from_slice(&p.embed[t as usize * e..(t as usize + 1) * e]);
    }
    let hidden: Vec<f64> = (0..h)
        .map(|j| (p.hidden_b[j] + (0..w * e).map(|i| x[i] * p.hidden_w[i * h + j]).sum::<f64>()).tanh())
        .collect();
    let logits: Vec<f64> = (0..v).map(|k| p.out_b[k] + (0..h).map(|j| hidden[j] * p.out_w[j * v + k]).sum::<f64>()).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    logits.iter().map(|l| (l - m).exp() / z).collect()
}

fn naive_loss(p: &PolicyParams, batch: &[SequenceSample], cfg: &TrainConfig) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in batch {
        let mut hist = s.prompt.clone();
        for (t, &tok) in s.output.iter().enumerate() {
            let probs = naive_probs(p, &hist);
            let lp = probs[tok as usize].ln();
            let ratio = (lp - s.old_logp[t]).exp();
            let a = s.advantage;
            let term = (ratio.min(cfg.delta) * a).min(ratio.clamp(1.0 - cfg.epsilon, 1.0 + cfg.epsilon) * a);
            let x = s.ref_logp[t] - lp;
            let kl = x.exp() - x - 1.0;
            let ent = -probs.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>();
            sum += -term + cfg.kl_coef * kl - cfg.entropy_coef * ent;
            n += 1;
            hist.push(tok);
        }
    }
    sum / n as f64
}

fn far_from_kinks(ratio: f64, cfg: &TrainConfig) -> bool {
    [1.0 - cfg.epsilon, 1.0 + cfg.epsilon, cfg.delta].iter().all(|k| (ratio - k).abs() > 1e-3)
}

fn instance(rng: &mut SplitMix64) -> (PolicyParams, Vec<SequenceSample>, TrainConfig) {
    let vocab = 5 + rng.below(6) as usize;
    let config = ModelConfig {
        vocab,
        window: 2 + rng.below(4) as usize,
        embed_dim: 1 + rng.below(4) as usize,
        hidden_dim: 2 + rng.below(6) as usize,
        max_len: 16,
        eos_id: (vocab - 1) as TokenId,
        pad_id: (vocab - 2) as TokenId,
    };
    let mut p = PolicyParams::init_random(config, rng.next_u64(), 0.8);
    for b in p.hidden_b.iter_mut().chain(p.out_b.iter_mut()) {
        *b = rng.next_f64() - 0.5;
    }
    let cfg = TrainConfig {
        epsilon: 0.1 + 0.3 * rng.next_f64(),
        delta: 1.6 + 3.0 * rng.next_f64(),
        kl_coef: 0.1 * rng.next_f64(),
        entropy_coef: 0.05 * rng.next_f64(),
        grad_clip: 1e12,
        ..TrainConfig::toy()
    };
    let tok = |rng: &mut SplitMix64| rng.below(vocab as u64) as TokenId;
    let batch = (0..1 + rng.below(3))
        .map(|_| {
            let prompt: Vec<TokenId> = (0..1 + rng.below(4)).map(|_| tok(rng)).collect();
            let output: Vec<TokenId> = (0..1 + rng.below(5)).map(|_| tok(rng)).collect();
            let mut hist = prompt.clone();
            let (mut old, mut refl) = (Vec::new(), Vec::new());
            for &t in &output {
                let lp = naive_probs(&p, &hist)[t as usize].ln();
                let old_lp = loop {
                    // Mix of unclipped, clipped and δ-bounded ratios.
                    let shift = match rng.below(3) {
                        0 => 0.3 * (rng.next_f64() - 0.5),
                        1 => 2.0 * (rng.next_f64() - 0.5),
                        _ => -2.0 * rng.next_f64(),
                    };
                    if far_from_kinks((-shift).exp(), &cfg) {
                        break lp + shift;
                    }
                };
                old.push(old_lp);
                refl.push(lp + (rng.next_f64() - 0.5));
                hist.push(t);
            }
            SequenceSample { prompt, output, advantage: 4.0 * (rng.next_f64() - 0.5), old_logp: old, ref_logp: refl }
        })
        .collect();
    (p, batch, cfg)
}

/// Worst disagreement seen over a batch of random instances.
#[derive(Debug, Clone, Copy, Default)]
pub struct FdReport {
    pub instances: usize,
    pub coords: usize,
    pub max_rel_err: f64,
    pub max_loss_err: f64,
}

/// Compares the analytic gradient with central differences on `instances`
/// random problems, `coords` random parameters each.
pub fn fd_check(seed: u64, instances: usize, coords: usize) -> FdReport {
    let mut rng = SplitMix64::new(seed);
    let mut r = FdReport { instances, ..Default::default() };
    for _ in 0..instances {
        let (p, batch, cfg) = instance(&mut rng);
        let analytic = gradient(&Policy::new(p.clone()), &batch, &cfg).unwrap();
        let loss0 = naive_loss(&p, &batch, &cfg);
        r.max_loss_err = r.max_loss_err.max((analytic.stats.loss - loss0).abs() / (1.0 + loss0.abs()));
        let g: Vec<f64> = analytic.grads.iter().copied().collect();
        for _ in 0..coords {
            let i = rng.below(g.len() as u64) as usize;
            let h = 1e-5;
            let mut plus = p.clone();
            *plus.iter_mut().nth(i).unwrap() += h;
            let mut minus = p.clone();
            *minus.iter_mut().nth(i).unwrap() -= h;
            let fd = (naive_loss(&plus, &batch, &cfg) - naive_loss(&minus, &batch, &cfg)) / (2.0 * h);
            let scale = g[i].abs().max(fd.abs()).max(1e-6);
            r.max_rel_err = r.max_rel_err.max((g[i] - fd).abs() / scale);
            r.coords += 1;
        }
    }
    r
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let r = fd_check(20_240_611, INSTANCES, 12);
    assert!(r.max_loss_err <= 1e-10, "{r:?}");
    assert!(r.max_rel_err <= REL_TOL, "{r:?}");
    assert_eq!(r.coords, INSTANCES * 12);
}

#[test]
fn zero_advantage_without_aux_terms_gives_zero_gradient() {
    let mut rng = SplitMix64::new(5);
    let (p, mut batch, mut cfg) = instance(&mut rng);
    cfg.kl_coef = 0.0;
    cfg.entropy_coef = 0.0;
    for s in &mut batch {
        s.advantage = 0.0;
    }
    let out = gradient(&Policy::new(p), &batch, &cfg).unwrap();
    assert!(out.grads.iter().all(|&x| x == 0.0));
}
