//! Shardcast client over any transport, and an in-memory relay network.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use swarm_core::crypto::{Address, Keypair};
use swarm_core::shardcast::{
    download, heal, select_relay, selection_probs, update_stats, Assembly, DownloadError, Manifest, Relay, RelayPolicy,
    RelayStats, Request, Response, SelectionConfig, VersionTracker,
};
use swarm_core::SplitMix64;

use crate::error::{Error, Result};

/// One request to one relay. Returns the response and the observed transfer
/// rate in bytes per second.
pub trait Transport {
    fn relay_count(&self) -> usize;
    fn send(&mut self, relay: usize, request: &Request) -> (Response, f64);
}

#[derive(Debug, Clone)]
pub struct Client {
    pub trainer: Address,
    pub stats: Vec<RelayStats>,
    pub tracker: VersionTracker,
    pub selection: SelectionConfig,
    pub attempts_per_shard: usize,
    rng: SplitMix64,
}

impl Client {
    pub fn new(trainer: Address, relays: usize, selection: SelectionConfig, seed: u64) -> Self {
        Self {
            trainer,
            stats: vec![RelayStats::default(); relays],
            tracker: VersionTracker::default(),
            selection,
            attempts_per_shard: 3 * relays.max(1),
            rng: SplitMix64::new(seed),
        }
    }

    /// Requests the probe file from every relay to seed the statistics.
    pub fn probe(&mut self, t: &mut impl Transport, now_ms: u64) {
        for r in 0..t.relay_count() {
            let (resp, bw) = t.send(r, &Request::Probe);
            update_stats(&mut self.stats[r], bw, resp == Response::Probe, now_ms, self.selection.beta);
        }
    }

    pub fn probabilities(&self) -> Vec<f64> {
        selection_probs(&self.stats, self.selection.p_min)
    }

    /// A manifest for `version` with a valid trainer signature, from the
    /// first relay that has one.
    pub fn manifest(&mut self, t: &mut impl Transport, version: u64) -> Option<Manifest> {
        let first = select_relay(&self.probabilities(), &mut self.rng);
        let n = t.relay_count();
        (0..n).map(|i| (first + i) % n).find_map(|r| match t.send(r, &Request::Manifest(version)).0 {
            Response::Manifest(m) if m.version == version && m.verify(&self.trainer).is_ok() => Some(m),
            _ => None,
        })
    }

    /// Downloads and verifies one version. A version whose assembly fails
    /// verification is discarded for good.
    pub fn download(&mut self, t: &mut impl Transport, version: u64, now_ms: u64) -> Result<Vec<u8>> {
        if self.tracker.is_discarded(version) {
            return Err(Error::Download(format!("version {version} was discarded")));
        }
        let manifest = self.manifest(t, version).ok_or_else(|| Error::Download(format!("no relay serves version {version}")))?;
        let assembly = Assembly::new(manifest, &self.trainer).map_err(|e| Error::Download(format!("{e:?}")))?;
        let out = download(assembly, &mut self.stats, &self.selection, &mut self.rng, now_ms, self.attempts_per_shard, |relay, v, index| {
            match t.send(relay, &Request::Shard { version: v, index }) {
                (Response::Shard(bytes), bw) => Ok((bytes, bw)),
                _ => Err(()),
            }
        });
        match out {
            Ok(bytes) => {
                self.tracker.complete(version);
                Ok(bytes)
            }
            Err(e @ DownloadError::AssembledMismatch) | Err(e @ DownloadError::BadManifest) => {
                self.tracker.discard(version);
                Err(Error::Download(format!("version {version}: {e:?}")))
            }
            Err(e) => Err(Error::Download(format!("version {version}: {e:?}"))),
        }
    }

    /// Downloads a version that may still be arriving at the relays: absent
    /// pieces are polled for every `poll` until `deadline`. Returns the bytes
    /// and the moment each shard was obtained.
    pub fn download_waiting(
        &mut self,
        t: &mut impl Transport,
        version: u64,
        deadline: Instant,
        poll: Duration,
    ) -> Result<(Vec<u8>, Vec<Instant>)> {
        let epoch = Instant::now();
        let timeout = || Error::Download(format!("version {version}: timed out"));
        if self.tracker.is_discarded(version) {
            return Err(Error::Download(format!("version {version} was discarded")));
        }
        let manifest = loop {
            if let Some(m) = self.manifest(t, version) {
                break m;
            }
            if Instant::now() >= deadline {
                return Err(timeout());
            }
            std::thread::sleep(poll);
        };
        let mut assembly = Assembly::new(manifest, &self.trainer).map_err(|e| Error::Download(format!("{e:?}")))?;
        let mut times = vec![None; assembly.manifest.num_shards()];
        while !assembly.is_complete() {
            let missing: Vec<usize> = assembly.missing().collect();
            for index in missing {
                let now_ms = epoch.elapsed().as_millis() as u64;
                heal(&mut self.stats, now_ms, &self.selection);
                let relay = select_relay(&self.probabilities(), &mut self.rng);
                match t.send(relay, &Request::Shard { version, index }) {
                    (Response::Shard(bytes), bw) => {
                        let ok = assembly.offer(index, bytes);
                        update_stats(&mut self.stats[relay], bw, ok, now_ms, self.selection.beta);
                        if ok {
                            times[index] = Some(Instant::now());
                        }
                    }
                    // Not uploaded yet; not the relay's fault.
                    (Response::NotFound, _) => {}
                    _ => update_stats(&mut self.stats[relay], 0.0, false, now_ms, self.selection.beta),
                }
            }
            if !assembly.is_complete() {
                if Instant::now() >= deadline {
                    return Err(timeout());
                }
                std::thread::sleep(poll);
            }
        }
        match assembly.finish() {
            Ok(bytes) => {
                self.tracker.complete(version);
                Ok((bytes, times.into_iter().map(|t| t.expect("complete assembly")).collect()))
            }
            Err(e) => {
                self.tracker.discard(version);
                Err(Error::Download(format!("version {version}: {e:?}")))
            }
        }
    }

    /// The oldest version in `from..=newest` that downloads and verifies,
    /// skipping discarded ones.
    pub fn download_from(&mut self, t: &mut impl Transport, from: u64, newest: u64, now_ms: u64) -> Result<(u64, Vec<u8>)> {
        let mut last = Error::Download(format!("no version in {from}..={newest}"));
        for v in from..=newest {
            if self.tracker.is_discarded(v) {
                continue;
            }
            match self.download(t, v, now_ms) {
                Ok(bytes) => return Ok((v, bytes)),
                Err(e) => last = e,
            }
        }
        Err(last)
    }
}

/// Relays held in memory, some of which may be faulty.
#[derive(Debug, Clone)]
pub struct SimNetwork {
    pub relays: Vec<Relay>,
    /// Relays that flip a bit in every shard they store.
    pub corrupt: BTreeSet<usize>,
    /// Simulated bytes per second of each relay.
    pub bandwidth: Vec<f64>,
    pub now_ms: u64,
    /// Requests answered with `Throttled`, per relay.
    pub throttled: Vec<u64>,
    /// Requests answered with `Denied`, per relay.
    pub denied: Vec<u64>,
    /// Shards served by corrupting relays.
    pub corrupt_served: u64,
}

impl SimNetwork {
    pub fn new(relays: usize, policy: RelayPolicy, corrupt: BTreeSet<usize>) -> Self {
        Self::with_policies(vec![policy; relays], corrupt)
    }

    pub fn with_policies(policies: Vec<RelayPolicy>, corrupt: BTreeSet<usize>) -> Self {
        let n = policies.len();
        Self {
            relays: policies.into_iter().map(Relay::new).collect(),
            corrupt,
            bandwidth: (0..n).map(|i| 1e6 * (1.0 + i as f64)).collect(),
            now_ms: 0,
            throttled: vec![0; n],
            denied: vec![0; n],
            corrupt_served: 0,
        }
    }

    pub fn set_allowlist(&mut self, allowed: &BTreeSet<Address>) {
        for r in &mut self.relays {
            r.set_allowlist(allowed.clone());
        }
    }

    /// Origin side: shards `bytes` and pushes manifest and shards to every relay.
    pub fn publish(&mut self, bytes: &[u8], version: u64, shard_size: usize, trainer: &Keypair) -> Result<Manifest> {
        let m = Manifest::build(bytes, version, shard_size, trainer);
        self.publish_manifest(&m, bytes)?;
        Ok(m)
    }

    /// Pushes an already-built manifest with its bytes.
    pub fn publish_manifest(&mut self, m: &Manifest, bytes: &[u8]) -> Result<()> {
        for (i, relay) in self.relays.iter_mut().enumerate() {
            relay.store.insert_manifest(m.clone())?;
            for (j, shard) in bytes.chunks(m.shard_size as usize).enumerate() {
                let mut shard = shard.to_vec();
                if self.corrupt.contains(&i) {
                    let at = (j * 7919) % shard.len();
                    shard[at] ^= 0x10;
                }
                relay.store.insert_shard(m.version, j, shard)?;
            }
        }
        Ok(())
    }

    /// Transport for one client.
    pub fn link(&mut self, client: Address) -> SimLink<'_> {
        SimLink { net: self, client }
    }
}

pub struct SimLink<'a> {
    net: &'a mut SimNetwork,
    client: Address,
}

impl Transport for SimLink<'_> {
    fn relay_count(&self) -> usize {
        self.net.relays.len()
    }

    fn send(&mut self, relay: usize, request: &Request) -> (Response, f64) {
        let now = self.net.now_ms;
        let resp = self.net.relays[relay].handle(&self.client, request, now);
        match resp {
            Response::Throttled => self.net.throttled[relay] += 1,
            Response::Denied => self.net.denied[relay] += 1,
            Response::Shard(_) if self.net.corrupt.contains(&relay) => self.net.corrupt_served += 1,
            _ => {}
        }
        (resp, self.net.bandwidth[relay])
    }
}
