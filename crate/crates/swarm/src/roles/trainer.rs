//! Trainer process: serves the step counter and the upload bucket, consumes
//! validated rollouts in a fixed order, trains, and broadcasts checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use swarm_core::crypto::Address;
use swarm_core::trainer::{rollout_version, BatchCollector, StepLedger, Trainer};

use super::validator::bucket_of;
use super::worker::worker_key;
use super::{announce, block_on, RoleArgs};
use crate::bucket::{ObjectKey, ObjectState};
use crate::config::RunConfig;
use crate::error::{Error, IoContext, Result};
use crate::format;
use crate::net::api::NodeDto;
use crate::net::relay::publish_http;
use crate::net::trainer::{serve_trainer, TrainerState, TrainerStatus};
use crate::net::{base_url, bind, Http, Link};
use crate::setup::{trainer_key, write_atomic};
use crate::sim::{consume_step, offer_file, parse_upload, task_index, StepSummary, STEPS_HEADER};

const POLL: Duration = Duration::from_millis(10);

/// Addresses of every rollout worker of the run, sorted.
pub fn roster(cfg: &RunConfig) -> Vec<Address> {
    let mut r: Vec<Address> = (0..cfg.workers.count as u64)
        .map(|i| worker_key(cfg, i, false).address())
        .chain((0..cfg.workers.adversarial.len() as u64).map(|j| worker_key(cfg, j, true).address()))
        .collect();
    r.sort();
    r
}

/// Files per worker and step that the trainer looks at.
pub fn submissions_per_worker(cfg: &RunConfig) -> u64 {
    let workers = (cfg.workers.count + cfg.workers.adversarial.len()).max(1) as u64;
    cfg.run.max_submissions_per_step.div_ceil(workers) + 1
}

struct Append {
    file: std::fs::File,
    path: std::path::PathBuf,
}

impl Append {
    fn create(path: std::path::PathBuf, header: &str) -> Result<Self> {
        let mut file = std::fs::File::create(&path).at(&path)?;
        file.write_all(header.as_bytes()).at(&path)?;
        Ok(Self { file, path })
    }

    fn push(&mut self, text: &str) -> Result<()> {
        self.file.write_all(text.as_bytes()).at(&self.path)
    }
}

/// Pool members as seen by the orchestrator.
fn pool_states(http: &Http, orchestrator: &str) -> BTreeMap<Address, String> {
    let Ok(Ok(nodes)) = http.get(orchestrator, "/nodes").map(|r| r.json::<Vec<NodeDto>>()) else {
        return BTreeMap::new();
    };
    nodes.into_iter().filter_map(|n| Some((Address::from_hex(&n.address).ok()?, n.state))).collect()
}

fn is_active(states: &BTreeMap<Address, String>, a: &Address) -> bool {
    states.get(a).is_some_and(|s| s == "active")
}

pub fn run_trainer(args: &RoleArgs) -> Result<()> {
    let cfg = args.config()?;
    let setup = args.setup()?;
    let key = trainer_key(cfg.run.seed);
    let bucket = bucket_of(&args.run_dir);
    let state = Arc::new(TrainerState {
        status: Mutex::new(TrainerStatus { step: 0, version: 0, scanning: 0, done: false, metrics: Vec::new() }),
        bucket: bucket.clone(),
    });
    let served = state.clone();
    let run_dir = args.run_dir.clone();
    std::thread::spawn(move || {
        let r = block_on(async move {
            let listener = bind(0).await?;
            announce(&run_dir, "trainer", &base_url(listener.local_addr()?))?;
            serve_trainer(listener, served).await
        });
        if let Err(e) = r {
            tracing::error!("trainer server: {e}");
        }
    });

    let (tx, rx) = mpsc::channel::<(u64, Vec<u8>)>();
    let relays = args.relays.clone();
    let (pkey, shard_size, link) = (key.clone(), cfg.shardcast.shard_size, Link::capped(cfg.shardcast.origin_bandwidth));
    let publisher = std::thread::spawn(move || -> Result<()> {
        for (version, bytes) in rx {
            publish_http(&relays, &pkey, &bytes, version, shard_size, link)?;
            tracing::info!("published version {version}");
        }
        Ok(())
    });

    let orch = args.orchestrator()?.to_string();
    let http = Http::new(key.clone(), Link::unshaped());
    let roster = roster(&cfg);
    let timeout = Duration::from_secs(cfg.run.timeout_secs);
    let started = Instant::now();
    while !roster.iter().all(|a| is_active(&pool_states(&http, &orch), a)) {
        if started.elapsed() > timeout {
            return Err(Error::Liveness("workers did not join".into()));
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    if roster.is_empty() {
        std::thread::sleep(timeout);
        return Err(Error::Liveness("step 0: no rollout workers".into()));
    }

    let mut trainer = Trainer::new(setup.base.clone(), cfg.train_config()?)?;
    tx.send((0, trainer.params().to_bytes())).map_err(|_| Error::Http("publisher stopped".into()))?;
    let mut ledger = StepLedger::new(cfg.train.prompts_per_step);
    let index = task_index(&setup.dataset);
    let (k, p, g) = (cfg.run.async_level, cfg.train.prompts_per_step, cfg.train.group_size);
    let cap = submissions_per_worker(&cfg);
    let mut steps_csv = Append::create(args.run_dir.join("steps.csv"), STEPS_HEADER)?;
    let mut metrics_csv = Append::create(args.run_dir.join("metrics.csv"), format::METRICS_HEADER)?;
    let mut consumed_log = Append::create(args.run_dir.join("consumed.log"), "")?;
    let mut banned: BTreeSet<Address> = BTreeSet::new();

    for _ in 0..cfg.run.steps {
        let step = ledger.step_counter();
        let version = rollout_version(step, k);
        let mut collector = BatchCollector::new(step, p, cfg.train.max_staleness);
        let (mut files, mut rejected) = (0usize, 0usize);
        let mut states = pool_states(&http, &orch);
        let mut last_progress = Instant::now();
        let mut last_poll = Instant::now();
        'scan: for sub in 0..cap {
            state.status.lock().unwrap().scanning = sub;
            for a in &roster {
                if collector.is_ready() {
                    break 'scan;
                }
                if banned.contains(a) {
                    continue;
                }
                let obj = ObjectKey { step, node: *a, submission: sub };
                loop {
                    match bucket.state(&obj) {
                        ObjectState::Accepted => {
                            let bytes = bucket.read_accepted(&obj)?;
                            let id = swarm_core::rollout::file_id(step, a, sub);
                            if let Ok(file) = parse_upload(&String::from_utf8_lossy(&bytes), &id) {
                                let taken = offer_file(&mut collector, &file, &setup.dataset, &index, g);
                                ledger.record_accepted(step, taken);
                            }
                            files += 1;
                            break;
                        }
                        ObjectState::Rejected => {
                            files += 1;
                            rejected += 1;
                            banned.insert(*a);
                            break;
                        }
                        ObjectState::Missing if !is_active(&states, a) => {
                            if states.get(a).is_some_and(|s| s == "slashed") {
                                banned.insert(*a);
                            }
                            break;
                        }
                        _ => {
                            if last_progress.elapsed() > timeout {
                                return Err(Error::Liveness(format!("step {step}: no upload from {} {sub}", a.to_hex())));
                            }
                            if last_poll.elapsed() > POLL * 20 {
                                states = pool_states(&http, &orch);
                                last_poll = Instant::now();
                            }
                            std::thread::sleep(POLL);
                            continue;
                        }
                    }
                }
                last_progress = Instant::now();
            }
        }
        if !collector.is_ready() {
            return Err(Error::Liveness(format!("step {step}: no full batch after {files} files")));
        }
        let out = consume_step(&mut trainer, &mut ledger, collector, version, files, rejected)?;
        steps_csv.push(&out.summary.csv_row())?;
        for m in &out.metrics {
            metrics_csv.push(&format::metrics_row(m))?;
        }
        for c in &out.consumed {
            consumed_log.push(&c.line())?;
        }
        log_step(&out.summary);
        {
            let mut st = state.status.lock().unwrap();
            st.step = ledger.step_counter();
            st.version = trainer.version;
            st.scanning = 0;
            st.metrics.extend(out.metrics);
        }
        tx.send((trainer.version, trainer.params().to_bytes())).map_err(|_| Error::Http("publisher stopped".into()))?;
    }
    drop(tx);
    let published = publisher.join().map_err(|_| Error::Http("publisher panicked".into()))?;
    write_atomic(&args.run_dir.join("final.params"), &trainer.params().to_bytes())?;
    state.status.lock().unwrap().done = true;
    published?;
    // Workers and validators poll for `done` before exiting.
    std::thread::sleep(Duration::from_millis(500));
    Ok(())
}

fn log_step(s: &StepSummary) {
    tracing::info!("step {} reward {:.3} penalty {:.3} files {} rejected {}", s.step, s.mean_task_reward, s.mean_length_penalty, s.files, s.rejected_files);
}

pub fn final_params_path(run_dir: &Path) -> std::path::PathBuf {
    run_dir.join("final.params")
}
