//! Checkpoint broadcast through relay servers over shaped loopback links.

use std::sync::{mpsc, Arc, Mutex};
use std::time::{Duration, Instant};

use swarm::broadcast::Client;
use swarm::net::relay::{publish_http, push_allowlist, serve_relay, HttpRelays, RelayState};
use swarm::net::{base_url, bind, Link};
use swarm::roles::block_on;
use swarm_core::crypto::Keypair;
use swarm_core::shardcast::{RelayPolicy, SelectionConfig};
use swarm_core::SplitMix64;

const MB: u64 = 1_000_000;

fn start_relays(n: usize, corrupt: &[usize], owner: &Keypair, trainer: &Keypair) -> Vec<String> {
    (0..n)
        .map(|i| {
            let state = RelayState::new(RelayPolicy { rate_per_sec: 1e6, burst: 1e6, ..RelayPolicy::default() }, owner.address(), trainer.address(), corrupt.contains(&i));
            let (tx, rx) = mpsc::channel();
            std::thread::spawn(move || {
                block_on(async move {
                    let l = bind(0).await?;
                    tx.send(base_url(l.local_addr()?)).unwrap();
                    serve_relay(l, Arc::new(Mutex::new(state))).await
                })
            });
            rx.recv().unwrap()
        })
        .collect()
}

fn payload(len: usize) -> Vec<u8> {
    let mut rng = SplitMix64::new(11);
    (0..len).map(|_| rng.next_u64() as u8).collect()
}

struct Net {
    relays: Vec<String>,
    owner: Keypair,
    trainer: Keypair,
    client: Keypair,
}

fn net(n: usize, corrupt: &[usize]) -> Net {
    let (owner, trainer, client) = (Keypair::derive("owner", 1), Keypair::derive("trainer", 1), Keypair::derive("client", 1));
    let relays = start_relays(n, corrupt, &owner, &trainer);
    push_allowlist(&relays, &owner, [client.address()], 1).unwrap();
    Net { relays, owner, trainer, client }
}

impl Net {
    fn client(&self, link: Link) -> (Client, HttpRelays) {
        let mut relays = HttpRelays::new(self.relays.clone(), &self.client, &vec![link; self.relays.len()]);
        let mut c = Client::new(self.trainer.address(), self.relays.len(), SelectionConfig::default(), 5);
        c.probe(&mut relays, 0);
        (c, relays)
    }
}

#[test]
fn first_shard_arrives_before_the_origin_finishes_uploading() {
    let n = net(1, &[]);
    let bytes = payload(1_000_000);
    let shard = 128 * 1024;
    assert!(bytes.len().div_ceil(shard) >= 4);
    let (mut client, mut relays) = n.client(Link::unshaped());
    let started = Instant::now();
    let got = std::thread::scope(|s| {
        let fetch = s.spawn(|| client.download_waiting(&mut relays, 0, started + Duration::from_secs(20), Duration::from_millis(2)));
        let up = publish_http(&n.relays, &n.trainer, &bytes, 0, shard, Link::capped(10 * MB)).unwrap();
        let (got, times) = fetch.join().unwrap().unwrap();
        let finished = up.finished().unwrap();
        assert!(times[0] < finished, "shard 0 at {:?}, origin done at {:?}", times[0] - started, finished - started);
        assert!(finished - started >= Duration::from_millis(80), "the origin link was not shaped");
        got
    });
    assert_eq!(got, bytes);
}

#[test]
fn a_corrupting_relay_never_yields_a_corrupted_checkpoint() {
    let n = net(3, &[1]);
    let bytes = payload(300_000);
    publish_http(&n.relays, &n.trainer, &bytes, 0, 32 * 1024, Link::unshaped()).unwrap();
    let (mut client, mut relays) = n.client(Link::unshaped());
    for _ in 0..5 {
        let (got, _) = client.download_waiting(&mut relays, 0, Instant::now() + Duration::from_secs(10), Duration::from_millis(5)).unwrap();
        assert_eq!(got, bytes);
        client.tracker = Default::default();
    }
    let p = client.probabilities();
    assert!(p[1] < p[0] && p[1] < p[2], "corrupting relay should lose weight: {p:?}");
}

#[test]
fn clients_off_the_allowlist_are_denied() {
    let n = net(1, &[]);
    publish_http(&n.relays, &n.trainer, &payload(1000), 0, 512, Link::unshaped()).unwrap();
    let stranger = Keypair::derive("stranger", 1);
    let http = swarm::net::Http::new(stranger, Link::unshaped());
    assert_eq!(http.get(&n.relays[0], "/manifest/0").unwrap().status, 403);
    let member = swarm::net::Http::new(n.client.clone(), Link::unshaped());
    assert_eq!(member.get(&n.relays[0], "/manifest/0").unwrap().status, 200);
    push_allowlist(&n.relays, &n.owner, [], 2).unwrap();
    assert_eq!(member.get(&n.relays[0], "/manifest/0").unwrap().status, 403);
}

#[test]
fn only_the_trainer_may_publish() {
    let n = net(1, &[]);
    let r = publish_http(&n.relays, &n.client, &payload(1000), 0, 512, Link::unshaped());
    assert!(r.is_err());
}
