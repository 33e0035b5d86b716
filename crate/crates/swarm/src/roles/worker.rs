//! Rollout worker process: follows the step counter, fetches checkpoints
//! through shardcast and uploads signed rollout files.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use swarm_core::adversary::Attack;
use swarm_core::crypto::Address;
use swarm_core::shardcast::RETAINED_VERSIONS;
use swarm_core::trainer::rollout_version;
use swarm_core::{Policy, PolicyParams};

use super::{poll_step, Agent, RoleArgs};
use crate::broadcast::Client;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::format;
use crate::net::api::Role;
use crate::net::relay::HttpRelays;
use crate::net::{Http, Link};
use crate::setup::{node_key, trainer_key};
use crate::sim::make_file;

const POLL: Duration = Duration::from_millis(20);

/// Checkpoints a node has downloaded and verified.
pub struct Checkpoints {
    pub client: Client,
    pub relays: HttpRelays,
    pub cache: BTreeMap<u64, Policy>,
}

impl Checkpoints {
    pub fn new(cfg: &RunConfig, key: &swarm_core::crypto::Keypair, relays: &[String]) -> Self {
        let link = Link::capped(cfg.shardcast.relay_bandwidth);
        let mut relays = HttpRelays::new(relays.to_vec(), key, &vec![link; relays.len()]);
        let mut client = Client::new(trainer_key(cfg.run.seed).address(), relays.urls.len(), cfg.selection_config(), key.address().seed_int());
        client.probe(&mut relays, 0);
        Self { client, relays, cache: BTreeMap::new() }
    }

    /// `version`, or the first newer one up to `newest` that is not discarded,
    /// waiting up to `wait` for each to arrive.
    pub fn fetch(&mut self, version: u64, newest: u64, wait: Duration) -> Result<u64> {
        let mut last = Error::Download(format!("no version in {version}..={newest}"));
        for v in version..=newest.max(version) {
            if self.cache.contains_key(&v) {
                return Ok(v);
            }
            if self.client.tracker.is_discarded(v) {
                continue;
            }
            match self.client.download_waiting(&mut self.relays, v, Instant::now() + wait, POLL) {
                Ok((bytes, _)) => {
                    self.cache.insert(v, Policy::new(PolicyParams::from_bytes(&bytes)?));
                    while self.cache.len() > RETAINED_VERSIONS + 1 {
                        self.cache.pop_first();
                    }
                    return Ok(v);
                }
                Err(e) if self.client.tracker.is_discarded(v) => last = e,
                Err(e) => return Err(e),
            }
        }
        Err(last)
    }
}

pub fn worker_key(cfg: &RunConfig, index: u64, attack: bool) -> swarm_core::crypto::Keypair {
    node_key(if attack { "adversary" } else { "worker" }, cfg.run.seed, index)
}

pub fn object_path(step: u64, node: &Address, submission: u64) -> String {
    format!("/rollouts/{step}/{}-{submission}.txt", node.to_hex())
}

pub fn run_worker(args: &RoleArgs) -> Result<()> {
    let cfg = args.config()?;
    let setup = args.setup()?;
    let attack = args.attack.as_deref().map(|a| Attack::parse(a).ok_or_else(|| Error::Config(format!("unknown attack {a:?}")))).transpose()?;
    let key = worker_key(&cfg, args.index, attack.is_some());
    let agent = Agent::new(key.clone(), &cfg, args.orchestrator()?, Role::RolloutWorker);
    agent.join()?;
    let beats = agent.spawn_heartbeats();
    let trainer = Http::new(key.clone(), Link::unshaped());
    let vcfg = cfg.validator_config();
    let cap = super::trainer::submissions_per_worker(&cfg);
    let mut ckpt: Option<Checkpoints> = None;
    let (mut cur_step, mut sub) = (u64::MAX, 0u64);
    loop {
        if agent.evicted() {
            tracing::info!("evicted from the pool");
            break;
        }
        if agent.take_restart() {
            tracing::info!("restart requested");
            agent.log("restarting workload");
            ckpt = None;
        }
        if !agent.has_task() {
            std::thread::sleep(POLL);
            continue;
        }
        let Some(st) = poll_step(&trainer, args.trainer()?) else {
            std::thread::sleep(POLL);
            continue;
        };
        if st.done {
            break;
        }
        if st.step != cur_step {
            (cur_step, sub) = (st.step, 0);
        }
        if sub >= cap || sub > st.scanning + 1 {
            std::thread::sleep(POLL);
            continue;
        }
        let c = ckpt.get_or_insert_with(|| Checkpoints::new(&cfg, &key, &args.relays));
        let version = rollout_version(st.step, cfg.run.async_level);
        let got = match c.fetch(version, st.version, Duration::from_secs(2)) {
            Ok(v) => v,
            Err(e) => {
                tracing::debug!("step {}: checkpoint {version}: {e}", st.step);
                continue;
            }
        };
        let file = make_file(&c.cache[&got], attack, &setup.dataset, &key, st.step, sub, got, &vcfg)?;
        let text = format::encode_rollout_file(&file);
        match trainer.put(args.trainer()?, &object_path(st.step, &key.address(), sub), text.as_bytes()) {
            Ok(r) if r.ok() || r.status == 409 => sub += 1,
            Ok(r) => tracing::warn!("upload: status {}", r.status),
            Err(e) => tracing::warn!("upload: {e}"),
        }
    }
    agent.stop();
    let _ = beats.join();
    Ok(())
}
