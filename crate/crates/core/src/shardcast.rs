//! Checkpoint broadcast: sharded manifests with digests, relay statistics
//! and throughput-weighted relay selection, per-client rate limiting, the
//! relay's version store, and verified assembly on the client.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::crypto::{sha256, Address, Digest, Keypair, SignatureBytes};
use crate::error::{Error, Result};
use crate::rng::{sample_index, SplitMix64};

/// Versions a relay keeps.
pub const RETAINED_VERSIONS: usize = 5;
pub const DEFAULT_SHARD_SIZE: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub version: u64,
    pub total_len: u64,
    pub shard_size: u64,
    pub shard_digests: Vec<Digest>,
    pub assembled_digest: Digest,
    pub signature: SignatureBytes,
}

impl Manifest {
    pub fn num_shards(&self) -> usize {
        self.shard_digests.len()
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 32 + 32 * self.shard_digests.len() + 32);
        out.extend_from_slice(b"manifest");
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.total_len.to_le_bytes());
        out.extend_from_slice(&self.shard_size.to_le_bytes());
        out.extend_from_slice(&(self.shard_digests.len() as u64).to_le_bytes());
        for d in &self.shard_digests {
            out.extend_from_slice(d);
        }
        out.extend_from_slice(&self.assembled_digest);
        out
    }

    /// Builds and signs the manifest for `bytes`.
    pub fn build(bytes: &[u8], version: u64, shard_size: usize, trainer: &Keypair) -> Self {
        assert!(shard_size > 0);
        let mut m = Self {
            version,
            total_len: bytes.len() as u64,
            shard_size: shard_size as u64,
            shard_digests: bytes.chunks(shard_size).map(sha256).collect(),
            assembled_digest: sha256(bytes),
            signature: [0; 64],
        };
        m.signature = trainer.sign(&m.signing_bytes());
        m
    }

    /// Signature and internal consistency.
    pub fn verify(&self, trainer: &Address) -> Result<()> {
        let expected = if self.shard_size == 0 { u64::MAX } else { self.total_len.div_ceil(self.shard_size) };
        if self.shard_digests.len() as u64 != expected {
            return Err(Error::Protocol("shard count does not match length".into()));
        }
        trainer.verify(&self.signing_bytes(), &self.signature)
    }

    pub fn shard_len(&self, index: usize) -> usize {
        let start = index as u64 * self.shard_size;
        (self.total_len.saturating_sub(start)).min(self.shard_size) as usize
    }
}

/// Splits a checkpoint into shards.
pub fn shards(bytes: &[u8], shard_size: usize) -> Vec<&[u8]> {
    bytes.chunks(shard_size).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelayStats {
    /// Bytes per second.
    pub bandwidth_ema: f64,
    pub success_ema: f64,
    pub last_probe_ms: u64,
}

impl Default for RelayStats {
    fn default() -> Self {
        Self { bandwidth_ema: 0.0, success_ema: 1.0, last_probe_ms: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionConfig {
    pub beta: f64,
    /// Minimum selection probability of any relay.
    pub p_min: f64,
    /// Relays unprobed for longer than this are healed.
    pub heal_after_ms: u64,
    /// Fraction of the gap to the fleet mean closed per healing tick.
    pub heal_pull: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { beta: 0.3, p_min: 0.05, heal_after_ms: 10_000, heal_pull: 0.1 }
    }
}

pub fn ema(prev: f64, observation: f64, beta: f64) -> f64 {
    (1.0 - beta) * prev + beta * observation
}

/// Folds one observation into a relay's statistics. Bandwidth is only
/// observed on success.
pub fn update_stats(stats: &mut RelayStats, bytes_per_sec: f64, success: bool, now_ms: u64, beta: f64) {
    stats.success_ema = ema(stats.success_ema, if success { 1.0 } else { 0.0 }, beta);
    if success {
        stats.bandwidth_ema = ema(stats.bandwidth_ema, bytes_per_sec.max(0.0), beta);
    }
    stats.last_probe_ms = now_ms;
}

/// One healing tick: relays not probed within `heal_after_ms` move their
/// bandwidth estimate `heal_pull` of the way to the fleet mean.
pub fn heal(stats: &mut [RelayStats], now_ms: u64, cfg: &SelectionConfig) {
    if stats.is_empty() {
        return;
    }
    let mean = stats.iter().map(|s| s.bandwidth_ema).sum::<f64>() / stats.len() as f64;
    for s in stats.iter_mut() {
        if now_ms.saturating_sub(s.last_probe_ms) > cfg.heal_after_ms {
            s.bandwidth_ema += cfg.heal_pull * (mean - s.bandwidth_ema);
        }
    }
}

pub fn relay_weight(s: &RelayStats) -> f64 {
    (s.success_ema * s.bandwidth_ema).max(0.0)
}

/// Selection law: proportional to `success × bandwidth`, except that no
/// relay falls below `p_min`; the remaining mass is shared in proportion to
/// weight among the relays above the floor.
pub fn selection_probs(stats: &[RelayStats], p_min: f64) -> Vec<f64> {
    let n = stats.len();
    if n == 0 {
        return Vec::new();
    }
    let w: Vec<f64> = stats.iter().map(relay_weight).collect();
    let uniform = alloc::vec![1.0 / n as f64; n];
    if p_min * n as f64 >= 1.0 || w.iter().all(|&x| x == 0.0) {
        return uniform;
    }
    let mut floored = alloc::vec![false; n];
    loop {
        let free_mass = 1.0 - p_min * floored.iter().filter(|&&f| f).count() as f64;
        let free_w: f64 = (0..n).filter(|&i| !floored[i]).map(|i| w[i]).sum();
        if free_w <= 0.0 {
            return uniform;
        }
        let c = free_mass / free_w;
        let mut changed = false;
        for i in 0..n {
            if !floored[i] && c * w[i] < p_min {
                floored[i] = true;
                changed = true;
            }
        }
        if !changed {
            return (0..n).map(|i| if floored[i] { p_min } else { c * w[i] }).collect();
        }
    }
}

pub fn select_relay(probs: &[f64], rng: &mut SplitMix64) -> usize {
    sample_index(probs, rng.next_f64())
}

/// Total-variation distance between two distributions on the same support.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Token bucket over explicit time.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBucket {
    pub rate_per_sec: f64,
    pub burst: f64,
    tokens: f64,
    last_ms: u64,
}

impl TokenBucket {
    pub fn new(rate_per_sec: f64, burst: f64, now_ms: u64) -> Self {
        Self { rate_per_sec, burst, tokens: burst, last_ms: now_ms }
    }

    pub fn try_take(&mut self, now_ms: u64) -> bool {
        let dt = now_ms.saturating_sub(self.last_ms) as f64 / 1000.0;
        self.tokens = (self.tokens + dt * self.rate_per_sec).min(self.burst);
        self.last_ms = self.last_ms.max(now_ms);
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Probe,
    Manifest(u64),
    Shard { version: u64, index: usize },
    Latest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Probe,
    Manifest(Manifest),
    Shard(Vec<u8>),
    Latest(Option<u64>),
    NotFound,
    Throttled,
    Denied,
}

#[derive(Debug, Clone)]
struct StoredVersion {
    manifest: Manifest,
    shards: Vec<Option<Vec<u8>>>,
}

/// A relay's retained checkpoints, at most [`RETAINED_VERSIONS`] of them.
#[derive(Debug, Clone, Default)]
pub struct VersionStore {
    versions: BTreeMap<u64, StoredVersion>,
}

impl VersionStore {
    pub fn latest(&self) -> Option<u64> {
        self.versions.keys().next_back().copied()
    }

    pub fn versions(&self) -> Vec<u64> {
        self.versions.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.versions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.versions.is_empty()
    }

    /// Starts a version; older versions beyond the retention window are dropped.
    pub fn insert_manifest(&mut self, manifest: Manifest) -> Result<()> {
        if self.latest().is_some_and(|v| manifest.version <= v) {
            return Err(Error::Protocol("version not newer than latest".into()));
        }
        let n = manifest.num_shards();
        self.versions.insert(manifest.version, StoredVersion { manifest, shards: alloc::vec![None; n] });
        while self.versions.len() > RETAINED_VERSIONS {
            self.versions.pop_first();
        }
        Ok(())
    }

    pub fn insert_shard(&mut self, version: u64, index: usize, bytes: Vec<u8>) -> Result<()> {
        let v = self.versions.get_mut(&version).ok_or_else(|| Error::Protocol("unknown version".into()))?;
        let slot = v.shards.get_mut(index).ok_or_else(|| Error::Protocol("shard index out of range".into()))?;
        *slot = Some(bytes);
        Ok(())
    }

    pub fn manifest(&self, version: u64) -> Option<&Manifest> {
        self.versions.get(&version).map(|v| &v.manifest)
    }

    pub fn shard(&self, version: u64, index: usize) -> Option<&[u8]> {
        self.versions.get(&version)?.shards.get(index)?.as_deref()
    }

    pub fn shard_mut(&mut self, version: u64, index: usize) -> Option<&mut Vec<u8>> {
        self.versions.get_mut(&version)?.shards.get_mut(index)?.as_mut()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelayPolicy {
    pub rate_per_sec: f64,
    pub burst: f64,
    /// When false every client is admitted.
    pub enforce_allowlist: bool,
}

impl Default for RelayPolicy {
    fn default() -> Self {
        Self { rate_per_sec: 200.0, burst: 64.0, enforce_allowlist: true }
    }
}

/// Request handling of one relay, independent of transport.
#[derive(Debug, Clone, Default)]
pub struct Relay {
    pub store: VersionStore,
    pub policy: RelayPolicy,
    allowlist: BTreeSet<Address>,
    buckets: BTreeMap<Address, TokenBucket>,
}

impl Relay {
    pub fn new(policy: RelayPolicy) -> Self {
        Self { policy, ..Default::default() }
    }

    pub fn set_allowlist(&mut self, allowed: BTreeSet<Address>) {
        self.buckets.retain(|a, _| allowed.contains(a));
        self.allowlist = allowed;
    }

    pub fn allowlist(&self) -> &BTreeSet<Address> {
        &self.allowlist
    }

    pub fn handle(&mut self, client: &Address, request: &Request, now_ms: u64) -> Response {
        if self.policy.enforce_allowlist && !self.allowlist.contains(client) {
            return Response::Denied;
        }
        let (rate, burst) = (self.policy.rate_per_sec, self.policy.burst);
        let bucket = self.buckets.entry(*client).or_insert_with(|| TokenBucket::new(rate, burst, now_ms));
        if !bucket.try_take(now_ms) {
            return Response::Throttled;
        }
        match request {
            Request::Probe => Response::Probe,
            Request::Latest => Response::Latest(self.store.latest()),
            Request::Manifest(v) => self.store.manifest(*v).cloned().map_or(Response::NotFound, Response::Manifest),
            Request::Shard { version, index } => {
                self.store.shard(*version, *index).map_or(Response::NotFound, |b| Response::Shard(b.to_vec()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DownloadError {
    BadManifest,
    /// Every attempt for this shard failed.
    ShardUnavailable(usize),
    AssembledMismatch,
}

/// Shards of one version being collected by a client.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub manifest: Manifest,
    shards: Vec<Option<Vec<u8>>>,
}

impl Assembly {
    pub fn new(manifest: Manifest, trainer: &Address) -> core::result::Result<Self, DownloadError> {
        manifest.verify(trainer).map_err(|_| DownloadError::BadManifest)?;
        let n = manifest.num_shards();
        Ok(Self { manifest, shards: alloc::vec![None; n] })
    }

    /// Stores `bytes` if they match the shard digest.
    pub fn offer(&mut self, index: usize, bytes: Vec<u8>) -> bool {
        let ok = self.manifest.shard_digests.get(index).is_some_and(|d| *d == sha256(&bytes));
        if ok {
            self.shards[index] = Some(bytes);
        }
        ok
    }

    pub fn missing(&self) -> impl Iterator<Item = usize> + '_ {
        self.shards.iter().enumerate().filter(|(_, s)| s.is_none()).map(|(i, _)| i)
    }

    pub fn is_complete(&self) -> bool {
        self.shards.iter().all(Option::is_some)
    }

    /// Concatenates the shards and checks the assembled digest.
    pub fn finish(self) -> core::result::Result<Vec<u8>, DownloadError> {
        let mut out = Vec::with_capacity(self.manifest.total_len as usize);
        for (i, s) in self.shards.into_iter().enumerate() {
            out.extend_from_slice(&s.ok_or(DownloadError::ShardUnavailable(i))?);
        }
        if sha256(&out) != self.manifest.assembled_digest {
            return Err(DownloadError::AssembledMismatch);
        }
        Ok(out)
    }
}

/// A fetch through some transport: bytes and the observed throughput, or a failure.
pub type Fetch = core::result::Result<(Vec<u8>, f64), ()>;

/// Synchronous download driver: each missing shard is fetched from a relay
/// drawn from the current selection law, with up to `attempts` tries.
/// Statistics are updated after every fetch.
pub fn download<F>(
    assembly: Assembly,
    stats: &mut [RelayStats],
    cfg: &SelectionConfig,
    rng: &mut SplitMix64,
    now_ms: u64,
    attempts: usize,
    mut fetch: F,
) -> core::result::Result<Vec<u8>, DownloadError>
where
    F: FnMut(usize, u64, usize) -> Fetch,
{
    let mut assembly = assembly;
    let version = assembly.manifest.version;
    let missing: Vec<usize> = assembly.missing().collect();
    for index in missing {
        let mut done = false;
        for _ in 0..attempts {
            let relay = select_relay(&selection_probs(stats, cfg.p_min), rng);
            match fetch(relay, version, index) {
                Ok((bytes, bw)) => {
                    let ok = assembly.offer(index, bytes);
                    update_stats(&mut stats[relay], bw, ok, now_ms, cfg.beta);
                    if ok {
                        done = true;
                        break;
                    }
                }
                Err(()) => update_stats(&mut stats[relay], 0.0, false, now_ms, cfg.beta),
            }
        }
        if !done {
            return Err(DownloadError::ShardUnavailable(index));
        }
    }
    assembly.finish()
}

/// Which versions a client has given up on; a discarded version is never
/// fetched again.
#[derive(Debug, Clone, Default)]
pub struct VersionTracker {
    pub current: Option<u64>,
    discarded: BTreeSet<u64>,
}

impl VersionTracker {
    /// Next version worth fetching given the newest one on offer.
    pub fn next_target(&self, latest: u64) -> Option<u64> {
        let target = latest;
        if self.current.is_some_and(|c| c >= target) || self.discarded.contains(&target) {
            None
        } else {
            Some(target)
        }
    }

    pub fn complete(&mut self, version: u64) {
        self.current = Some(self.current.map_or(version, |c| c.max(version)));
    }

    pub fn discard(&mut self, version: u64) {
        self.discarded.insert(version);
    }

    pub fn is_discarded(&self, version: u64) -> bool {
        self.discarded.contains(&version)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trainer() -> Keypair {
        Keypair::derive("trainer", 0)
    }

    #[test]
    fn manifest_shapes() {
        let bytes = alloc::vec![7u8; 10 * 1000];
        let m = Manifest::build(&bytes, 1, 1000, &trainer());
        assert_eq!(m.num_shards(), 10);
        assert!(m.verify(&trainer().address()).is_ok());
        let empty = Manifest::build(&[], 2, 1000, &trainer());
        assert_eq!(empty.num_shards(), 0);
        assert_eq!(crate::crypto::hex_encode(&empty.assembled_digest), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        let m = Manifest::build(&alloc::vec![1u8; 2500], 3, 1000, &trainer());
        assert_eq!((m.num_shards(), m.shard_len(2)), (3, 500));
    }

    #[test]
    fn forged_manifest_fails_verification() {
        let mut m = Manifest::build(&[1, 2, 3], 1, 2, &trainer());
        m.assembled_digest[0] ^= 1;
        assert!(m.verify(&trainer().address()).is_err());
        assert!(Assembly::new(m, &trainer().address()).is_err());
    }

    #[test]
    fn ema_arithmetic() {
        assert!((ema(100.0, 200.0, 0.3) - 130.0).abs() < 1e-12);
        let mut s = RelayStats::default();
        let mut prev = s.success_ema;
        for t in 0..20 {
            update_stats(&mut s, 0.0, false, t, 0.3);
            assert!(s.success_ema < prev);
            prev = s.success_ema;
        }
    }

    #[test]
    fn selection_examples() {
        let s = |sr: f64, bw: f64| RelayStats { bandwidth_ema: bw, success_ema: sr, last_probe_ms: 0 };
        let p = selection_probs(&[s(1.0, 100.0), s(0.5, 100.0)], 0.0);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12 && (p[1] - 1.0 / 3.0).abs() < 1e-12);
        let p = selection_probs(&[s(1.0, 5.0); 4], 0.05);
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-12));
        let p = selection_probs(&[s(1.0, 100.0), s(0.0, 100.0)], 0.05);
        assert!(p[1] >= 0.05 - 1e-15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn healing_raises_cold_relay() {
        let cfg = SelectionConfig::default();
        let mut stats = [
            RelayStats { bandwidth_ema: 100.0, success_ema: 1.0, last_probe_ms: 100_000 },
            RelayStats { bandwidth_ema: 10.0, success_ema: 1.0, last_probe_ms: 0 },
        ];
        let mut prev = stats[1].bandwidth_ema;
        for _ in 0..30 {
            heal(&mut stats, 100_000, &cfg);
            assert!(stats[1].bandwidth_ema > prev);
            prev = stats[1].bandwidth_ema;
        }
        assert_eq!(stats[0].bandwidth_ema, 100.0);
        assert!(stats[1].bandwidth_ema < 100.0);
    }

    #[test]
    fn bucket_throttles_after_burst() {
        let mut b = TokenBucket::new(1.0, 3.0, 0);
        assert!((0..3).all(|_| b.try_take(0)));
        assert!(!b.try_take(0));
        assert!(b.try_take(1000));
    }

    #[test]
    fn relay_retention_and_access_control() {
        let me = Keypair::derive("n", 0).address();
        let mut r = Relay::new(RelayPolicy { burst: 100.0, ..Default::default() });
        for v in 1..=6 {
            r.store.insert_manifest(Manifest::build(&[v as u8], v, 4, &trainer())).unwrap();
            r.store.insert_shard(v, 0, alloc::vec![v as u8]).unwrap();
            assert!(r.store.len() <= RETAINED_VERSIONS);
        }
        assert_eq!(r.handle(&me, &Request::Manifest(6), 0), Response::Denied);
        r.set_allowlist([me].into_iter().collect());
        assert_eq!(r.handle(&me, &Request::Manifest(1), 0), Response::NotFound);
        assert!(matches!(r.handle(&me, &Request::Manifest(2), 0), Response::Manifest(_)));
        assert_eq!(r.handle(&me, &Request::Shard { version: 6, index: 0 }, 0), Response::Shard(alloc::vec![6]));
        assert!(r.store.insert_manifest(Manifest::build(&[0], 6, 4, &trainer())).is_err());
        r.set_allowlist(BTreeSet::new());
        assert_eq!(r.handle(&me, &Request::Probe, 0), Response::Denied);
    }

    #[test]
    fn corrupted_shard_is_refetched_elsewhere() {
        let bytes: Vec<u8> = (0..5000u32).map(|i| (i * 7) as u8).collect();
        let m = Manifest::build(&bytes, 1, 1000, &trainer());
        let asm = Assembly::new(m, &trainer().address()).unwrap();
        let mut stats = [RelayStats { bandwidth_ema: 1.0, ..Default::default() }; 2];
        let out = download(asm, &mut stats, &SelectionConfig::default(), &mut SplitMix64::new(1), 0, 50, |relay, _, i| {
            let mut s = bytes[i * 1000..((i + 1) * 1000).min(bytes.len())].to_vec();
            if relay == 0 {
                s[0] ^= 1;
            }
            Ok((s, 1.0))
        })
        .unwrap();
        assert_eq!(out, bytes);
        assert!(stats[0].success_ema < stats[1].success_ema);
    }

    #[test]
    fn discarded_versions_are_not_refetched() {
        let mut t = VersionTracker::default();
        assert_eq!(t.next_target(3), Some(3));
        t.discard(3);
        assert_eq!(t.next_target(3), None);
        assert_eq!(t.next_target(4), Some(4));
        t.complete(4);
        assert_eq!(t.next_target(4), None);
    }

    proptest! {
        #[test]
        fn selection_law_is_a_floored_distribution(
            ws in proptest::collection::vec((0.0f64..1.0, 0.0f64..1e6), 1..12),
            p_min in 0.0f64..0.08,
        ) {
            let stats: Vec<RelayStats> = ws.iter().map(|&(sr, bw)| RelayStats { bandwidth_ema: bw, success_ema: sr, last_probe_ms: 0 }).collect();
            let p = selection_probs(&stats, p_min);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&x| x >= p_min - 1e-12));
            // Above the floor, probability is monotone in weight.
            for i in 0..p.len() {
                for j in 0..p.len() {
                    if relay_weight(&stats[i]) > relay_weight(&stats[j]) {
                        prop_assert!(p[i] >= p[j] - 1e-12);
                    }
                }
            }
        }

        #[test]
        fn any_flipped_bit_is_caught(len in 1usize..3000, at in 0usize..3000, bit in 0u8..8) {
            let bytes: Vec<u8> = (0..len).map(|i| (i * 31 % 251) as u8).collect();
            let m = Manifest::build(&bytes, 1, 256, &trainer());
            let mut asm = Assembly::new(m, &trainer().address()).unwrap();
            let at = at % len;
            for (i, s) in bytes.chunks(256).enumerate() {
                let mut s = s.to_vec();
                if i == at / 256 {
                    s[at % 256] ^= 1 << bit;
                    prop_assert!(!asm.offer(i, s));
                } else {
                    prop_assert!(asm.offer(i, s));
                }
            }
            prop_assert!(!asm.is_complete());
        }
    }
}
