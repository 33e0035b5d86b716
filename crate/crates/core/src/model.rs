//! The toy autoregressive policy.
//!
//! A single tanh hidden layer over a fixed window of the last `W` tokens:
//!
//! ```text
//! x      = concat(embed[c_0], …, embed[c_{W-1}])          (W·E)
//! hidden = tanh(hidden_b + hidden_wᵀ x)                     (H)
//! logits = out_b + out_wᵀ hidden                            (V)
//! probs  = softmax(logits)
//! ```
//!
//! All arithmetic is `f64` with a fixed summation order. In the first layer
//! each slot's contribution `Σ_e embed[c][e]·hidden_w[slot·E+e]` is summed
//! over `e` ascending from zero, then slots are added to `hidden_b` in
//! ascending order; the second layer sums hidden units ascending.
//! Transcendental functions come from `libm`.
//! Two nodes holding the same canonical parameter bytes therefore produce
//! bit-identical distributions and hidden vectors.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::rng::SplitMix64;

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Maximum total sequence length (prompt plus output), in tokens.
    pub max_len: usize,
    pub eos_id: TokenId,
    pub pad_id: TokenId,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 4 {
            return Err(Error::Config("vocab must be at least 4".into()));
        }
        if self.window < 1 || self.max_len < self.window {
            return Err(Error::Config("need max_len >= window >= 1".into()));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("embed_dim and hidden_dim must be positive".into()));
        }
        if self.eos_id == self.pad_id {
            return Err(Error::Config("eos_id must differ from pad_id".into()));
        }
        if self.eos_id as usize >= self.vocab || self.pad_id as usize >= self.vocab {
            return Err(Error::Config("eos_id and pad_id must be < vocab".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let (v, w, e, h) = (self.vocab, self.window, self.embed_dim, self.hidden_dim);
        v * e + w * e * h + h + h * v + v
    }

    const HEADER_WORDS: usize = 7;

    fn header(&self) -> [u64; Self::HEADER_WORDS] {
        [
            self.vocab as u64,
            self.window as u64,
            self.embed_dim as u64,
            self.hidden_dim as u64,
            self.max_len as u64,
            self.eos_id as u64,
            self.pad_id as u64,
        ]
    }
}

/// A categorical distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDist {
    pub probs: Vec<f64>,
}

impl TokenDist {
    pub fn entropy(&self) -> f64 {
        entropy(&self.probs)
    }

    pub fn is_normalized(&self) -> bool {
        let s: f64 = self.probs.iter().sum();
        self.probs.iter().all(|&p| p >= 0.0) && (s - 1.0).abs() <= 1e-9
    }
}

pub(crate) fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * libm::log(p))
        .sum::<f64>()
}

/// Weights of the policy. Also used as the container for gradients, which
/// share the exact layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: ModelConfig,
    /// `V × E`, row per token.
    pub embed: Vec<f64>,
    /// `(W·E) × H`, row index `slot·E + e`.
    pub hidden_w: Vec<f64>,
    pub hidden_b: Vec<f64>,
    /// `H × V`, row per hidden unit.
    pub out_w: Vec<f64>,
    pub out_b: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backpropagation and
/// commitments.
#[derive(Debug, Clone)]
pub struct Activations {
    pub window: Vec<TokenId>,
    pub hidden: Vec<f64>,
    pub probs: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let (v, w, e, h) = (config.vocab, config.window, config.embed_dim, config.hidden_dim);
        Self {
            config,
            embed: vec![0.0; v * e],
            hidden_w: vec![0.0; w * e * h],
            hidden_b: vec![0.0; h],
            out_w: vec![0.0; h * v],
            out_b: vec![0.0; v],
        }
    }

    /// Uniform initialisation in `[-scale, scale]` for every weight; biases start at zero.
    pub fn init_random(config: ModelConfig, seed: u64, scale: f64) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = SplitMix64::new(seed);
        let mut fill = |xs: &mut [f64], s: f64| {
            for x in xs.iter_mut() {
                *x = (2.0 * rng.next_f64() - 1.0) * s;
            }
        };
        fill(&mut p.embed, 1.0);
        fill(&mut p.hidden_w, scale);
        fill(&mut p.out_w, scale);
        p
    }

    pub fn tensors(&self) -> [&[f64]; 5] {
        [&self.embed, &self.hidden_w, &self.hidden_b, &self.out_w, &self.out_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.embed,
            &mut self.hidden_w,
            &mut self.hidden_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.tensors().into_iter().flat_map(|t| t.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.tensors_mut().into_iter().flat_map(|t| t.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.iter().map(|x| x * x).sum())
    }

    pub fn scale(&mut self, s: f64) {
        self.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += s * b;
        }
    }

    pub fn distance(&self, other: &Self) -> f64 {
        libm::sqrt(self.iter().zip(other.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    /// Canonical serialization: the seven `ModelConfig` integers as `u64` LE,
    /// then every tensor in field order as row-major IEEE-754 `f64` LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * (ModelConfig::HEADER_WORDS + self.config.num_params()));
        for w in self.config.header() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for x in self.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 * ModelConfig::HEADER_WORDS || !bytes.len().is_multiple_of(8) {
            return Err(invalid("params byte length"));
        }
        let mut words = bytes.chunks_exact(8).map(|c| {
            let mut b = [0u8; 8];
            b.copy_from_slice(c);
            b
        });
        let mut int = || u64::from_le_bytes(words.next().unwrap());
        let config = ModelConfig {
            vocab: int() as usize,
            window: int() as usize,
            embed_dim: int() as usize,
            hidden_dim: int() as usize,
            max_len: int() as usize,
            eos_id: int() as TokenId,
            pad_id: int() as TokenId,
        };
        config.validate()?;
        if bytes.len() != 8 * (ModelConfig::HEADER_WORDS + config.num_params()) {
            return Err(invalid("params byte length does not match header"));
        }
        let mut p = Self::zeros(config);
        for (x, w) in p.iter_mut().zip(words) {
            *x = f64::from_le_bytes(w);
        }
        if !p.is_finite() {
            return Err(Error::Numeric("params"));
        }
        Ok(p)
    }

    /// The last `W` tokens of `history`, left-padded with `pad_id`.
    pub fn context_window(&self, history: &[TokenId]) -> Vec<TokenId> {
        let w = self.config.window;
        let mut out = vec![self.config.pad_id; w];
        let take = history.len().min(w);
        out[w - take..].copy_from_slice(&history[history.len() - take..]);
        out
    }

    /// Distribution over the next token given a context of exactly `W` ids.
    pub fn forward(&self, context: &[TokenId]) -> Result<TokenDist> {
        if context.len() != self.config.window {
            return Err(invalid("context length must equal the window"));
        }
        Ok(TokenDist { probs: self.activations(context)?.probs })
    }

    /// Forward pass over the window of `history` (any length).
    pub fn forward_history(&self, history: &[TokenId]) -> Result<Activations> {
        let window = self.context_window(history);
        self.activations(&window)
    }

    pub fn activations(&self, window: &[TokenId]) -> Result<Activations> {
        self.check_window(window)?;
        let h_dim = self.config.hidden_dim;
        let mut pre = self.hidden_b.clone();
        let mut contrib = vec![0.0; h_dim];
        for (slot, &tok) in window.iter().enumerate() {
            self.slot_contribution(slot, tok, &mut contrib);
            for (acc, &c) in pre.iter_mut().zip(&contrib) {
                *acc += c;
            }
        }
        self.head(window, pre)
    }

    fn check_window(&self, window: &[TokenId]) -> Result<()> {
        if window.len() != self.config.window {
            return Err(invalid("window length"));
        }
        if let Some(&bad) = window.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(invalid(alloc::format!("token id {bad} out of vocabulary")));
        }
        Ok(())
    }

    /// `Σ_e embed[tok][e] · hidden_w[slot·E + e]`, written into `out`.
    fn slot_contribution(&self, slot: usize, tok: TokenId, out: &mut [f64]) {
        let (e_dim, h_dim) = (self.config.embed_dim, self.config.hidden_dim);
        out.fill(0.0);
        let emb = &self.embed[tok as usize * e_dim..(tok as usize + 1) * e_dim];
        for (e, &x) in emb.iter().enumerate() {
            let row = &self.hidden_w[(slot * e_dim + e) * h_dim..(slot * e_dim + e + 1) * h_dim];
            for (acc, &w) in out.iter_mut().zip(row) {
                *acc += x * w;
            }
        }
    }

    /// tanh, output layer and softmax over first-layer pre-activations.
    fn head(&self, window: &[TokenId], mut hidden: Vec<f64>) -> Result<Activations> {
        let v = self.config.vocab;
        for x in hidden.iter_mut() {
            *x = libm::tanh(*x);
        }
        let mut logits = self.out_b.clone();
        for (h, &a) in hidden.iter().enumerate() {
            let row = &self.out_w[h * v..(h + 1) * v];
            for (l, &w) in logits.iter_mut().zip(row) {
                *l += a * w;
            }
        }
        let probs = softmax(&logits);
        if !probs.iter().all(|p| p.is_finite()) {
            return Err(Error::Numeric("forward"));
        }
        Ok(Activations { window: window.to_vec(), hidden, probs })
    }
}

/// Parameters together with a precomputed table of every slot contribution,
/// `W × V × H`. Produces bit-identical results to [`PolicyParams`] at a
/// fraction of the cost per forward pass.
#[derive(Debug, Clone)]
pub struct Policy {
    params: PolicyParams,
    table: Vec<f64>,
}

impl core::ops::Deref for Policy {
    type Target = PolicyParams;

    fn deref(&self) -> &PolicyParams {
        &self.params
    }
}

impl From<PolicyParams> for Policy {
    fn from(params: PolicyParams) -> Self {
        Self::new(params)
    }
}

impl Policy {
    pub fn new(params: PolicyParams) -> Self {
        let c = params.config;
        let (v, h_dim) = (c.vocab, c.hidden_dim);
        let mut table = vec![0.0; c.window * v * h_dim];
        for slot in 0..c.window {
            for tok in 0..v {
                let at = (slot * v + tok) * h_dim;
                params.slot_contribution(slot, tok as TokenId, &mut table[at..at + h_dim]);
            }
        }
        Self { params, table }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn into_params(self) -> PolicyParams {
        self.params
    }

    pub fn forward(&self, context: &[TokenId]) -> Result<TokenDist> {
        if context.len() != self.config.window {
            return Err(invalid("context length must equal the window"));
        }
        Ok(TokenDist { probs: self.activations(context)?.probs })
    }

    pub fn forward_history(&self, history: &[TokenId]) -> Result<Activations> {
        let window = self.context_window(history);
        self.activations(&window)
    }

    pub fn activations(&self, window: &[TokenId]) -> Result<Activations> {
        self.params.check_window(window)?;
        let c = &self.params.config;
        let (v, h_dim) = (c.vocab, c.hidden_dim);
        let mut pre = self.params.hidden_b.clone();
        for (slot, &tok) in window.iter().enumerate() {
            let at = (slot * v + tok as usize) * h_dim;
            for (acc, &x) in pre.iter_mut().zip(&self.table[at..at + h_dim]) {
                *acc += x;
            }
        }
        self.params.head(window, pre)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| libm::exp(l - m)).collect();
    let s: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p /= s;
    }
    out
}

/// Teacher-forced pass over `prompt ‖ output`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Prefill {
    /// `ln π(output[t] | prompt, output[..t])`.
    pub logprobs: Vec<f64>,
    /// `π(output[t] | …)`.
    pub chosen_probs: Vec<f64>,
    /// Probability of EOS at every output position.
    pub eos_probs: Vec<f64>,
    pub entropies: Vec<f64>,
    /// Hidden vectors, `len(output) × H`, row per output position.
    pub hidden: Vec<f64>,
}

pub fn sequence_logprobs(params: &Policy, prompt: &[TokenId], output: &[TokenId]) -> Result<Prefill> {
    let c = &params.config;
    if prompt.len() + output.len() > c.max_len {
        return Err(invalid("sequence exceeds max_len"));
    }
    if let Some(&bad) = output.iter().find(|&&t| t as usize >= c.vocab) {
        return Err(invalid(alloc::format!("token id {bad} out of vocabulary")));
    }
    let mut history = Vec::with_capacity(prompt.len() + output.len());
    history.extend_from_slice(prompt);
    let mut pre = Prefill {
        logprobs: Vec::with_capacity(output.len()),
        chosen_probs: Vec::with_capacity(output.len()),
        eos_probs: Vec::with_capacity(output.len()),
        entropies: Vec::with_capacity(output.len()),
        hidden: Vec::with_capacity(output.len() * c.hidden_dim),
    };
    for &tok in output {
        let act = params.forward_history(&history)?;
        let p = act.probs[tok as usize];
        pre.logprobs.push(libm::log(p));
        pre.chosen_probs.push(p);
        pre.eos_probs.push(act.probs[c.eos_id as usize]);
        pre.entropies.push(entropy(&act.probs));
        pre.hidden.extend_from_slice(&act.hidden);
        history.push(tok);
    }
    Ok(pre)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig { vocab: 4, window: 3, embed_dim: 2, hidden_dim: 3, max_len: 8, eos_id: 3, pad_id: 2 }
    }

    #[test]
    fn zero_params_give_uniform() {
        let p = PolicyParams::zeros(cfg());
        let d = p.forward(&[0, 1, 2]).unwrap();
        assert!(d.probs.iter().all(|&x| x == 0.25));
    }

    #[test]
    fn hand_softmax_of_log_biases() {
        let mut p = PolicyParams::zeros(cfg());
        p.out_b = vec![libm::log(1.0), libm::log(2.0), libm::log(3.0), libm::log(4.0)];
        let d = p.forward(&[2, 2, 2]).unwrap();
        for (got, want) in d.probs.iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
        let pre = sequence_logprobs(&Policy::from(p.clone()), &[0], &[2]).unwrap();
        assert!((pre.logprobs[0] - libm::log(0.3)).abs() < 1e-15);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let p = PolicyParams::init_random(cfg(), 9, 0.5);
        let a = p.forward(&[0, 1, 3]).unwrap();
        let b = PolicyParams::from_bytes(&p.to_bytes()).unwrap().forward(&[0, 1, 3]).unwrap();
        let bits = |d: &TokenDist| d.probs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(a.is_normalized());
    }

    #[test]
    fn out_of_vocab_is_rejected() {
        let p = PolicyParams::zeros(cfg());
        assert!(matches!(p.forward(&[0, 1, 4]), Err(Error::InvalidInput(_))));
        assert!(sequence_logprobs(&Policy::from(p.clone()), &[0], &[9]).is_err());
    }

    #[test]
    fn zero_params_logprob_is_minus_ln_v() {
        let p = PolicyParams::zeros(cfg());
        let pre = sequence_logprobs(&Policy::from(p.clone()), &[0, 1], &[1, 0, 3]).unwrap();
        for lp in pre.logprobs {
            assert!((lp + libm::log(4.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn overflow_of_max_len_is_rejected() {
        let p = PolicyParams::zeros(cfg());
        assert!(sequence_logprobs(&Policy::from(p.clone()), &[0; 5], &[1; 4]).is_err());
    }

    #[test]
    fn cached_policy_matches_direct_forward_bitwise() {
        let p = PolicyParams::init_random(cfg(), 4, 0.7);
        let fast = Policy::new(p.clone());
        for w in [[0, 1, 3], [2, 2, 2], [3, 0, 1]] {
            let a = p.activations(&w).unwrap();
            let b = fast.activations(&w).unwrap();
            assert_eq!(a.probs.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.probs.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            assert_eq!(a.hidden.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.hidden.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
        assert!(fast.activations(&[0, 1]).is_err());
        assert!(fast.activations(&[0, 1, 4]).is_err());
    }

    #[test]
    fn window_pads_on_the_left() {
        let p = PolicyParams::zeros(cfg());
        assert_eq!(p.context_window(&[7]), vec![2, 2, 7]);
        assert_eq!(p.context_window(&[1, 2, 3, 4, 5]), vec![3, 4, 5]);
    }

    #[test]
    fn canonical_bytes_layout() {
        let p = PolicyParams::init_random(cfg(), 1, 0.1);
        let bytes = p.to_bytes();
        assert_eq!(bytes.len(), 8 * (7 + cfg().num_params()));
        assert_eq!(&bytes[..8], &4u64.to_le_bytes());
        assert_eq!(&bytes[56..64], &p.embed[0].to_le_bytes());
        assert_eq!(PolicyParams::from_bytes(&bytes).unwrap(), p);
        assert!(PolicyParams::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }
}
