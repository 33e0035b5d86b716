//! Validator process: claims uploads from the bucket, checks them against
//! the checkpoints they claim, and reports verdicts to the orchestrator.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Duration;

use swarm_core::validate::{validate_file, FailedCheck, Verdict};

use super::worker::Checkpoints;
use super::{poll_step, Agent, RoleArgs};
use crate::bucket::{Bucket, ObjectKey};
use crate::error::{IoContext, Result};
use crate::format;
use crate::net::api::{Role, VerdictDto};
use crate::net::{Http, Link};
use crate::setup::node_key;
use crate::sim::parse_upload;

const IDLE: Duration = Duration::from_millis(10);

pub fn bucket_of(run_dir: &std::path::Path) -> Bucket {
    Bucket::new(run_dir.join("bucket"))
}

pub fn verdict_log(run_dir: &std::path::Path, index: u64) -> std::path::PathBuf {
    run_dir.join(format!("verdicts-{index}.log"))
}

/// The verdict on one claimed upload.
fn judge(key: &ObjectKey, text: &str, ckpt: &mut Checkpoints, args: &RoleArgs, cfg: &crate::config::RunConfig, dataset: &[swarm_core::tasks::Task]) -> Verdict {
    let id = swarm_core::rollout::file_id(key.step, &key.node, key.submission);
    let file = match parse_upload(text, &id) {
        Ok(f) => f,
        Err(v) => return v,
    };
    let h = &file.header;
    if (h.step, h.node_address, h.submission_index) != (key.step, key.node, key.submission) {
        return Verdict::reject(id, FailedCheck::Schema, "header does not match the object key");
    }
    let latest = ckpt.relays.latest().unwrap_or(0);
    let claimed: BTreeSet<u64> = file.records.iter().map(|r| r.checkpoint_version).collect();
    for v in claimed {
        if v <= latest && !ckpt.cache.contains_key(&v) {
            if let Err(e) = ckpt.fetch(v, v, Duration::from_secs(2)) {
                tracing::debug!("validator {}: checkpoint {v}: {e}", args.index);
            }
        }
    }
    validate_file(&file, dataset, &ckpt.cache, &cfg.validator_config())
}

pub fn run_validator(args: &RoleArgs) -> Result<()> {
    let cfg = args.config()?;
    let setup = args.setup()?;
    let key = node_key("validator", cfg.run.seed, args.index);
    let agent = Agent::new(key.clone(), &cfg, args.orchestrator()?, Role::Validator);
    agent.join()?;
    let beats = agent.spawn_heartbeats();
    let trainer = Http::new(key.clone(), Link::unshaped());
    let bucket = bucket_of(&args.run_dir);
    let claimer = format!("validator-{}", args.index);
    let log_path = verdict_log(&args.run_dir, args.index);
    let mut log = std::fs::OpenOptions::new().create(true).append(true).open(&log_path).at(&log_path)?;
    let mut ckpt = Checkpoints::new(&cfg, &key, &args.relays);
    loop {
        if agent.evicted() {
            break;
        }
        if agent.take_restart() {
            agent.log("restarting workload");
            ckpt = Checkpoints::new(&cfg, &key, &args.relays);
        }
        if !agent.has_task() {
            std::thread::sleep(IDLE);
            continue;
        }
        let Some((obj, path)) = bucket.claim(&claimer)? else {
            if poll_step(&trainer, args.trainer()?).is_some_and(|s| s.done) {
                break;
            }
            std::thread::sleep(IDLE);
            continue;
        };
        let text = std::fs::read_to_string(&path).unwrap_or_default();
        let verdict = judge(&obj, &text, &mut ckpt, args, &cfg, &setup.dataset);
        let r = agent.http.post_json(&agent.orchestrator, "/verdicts", &VerdictDto::new(&obj.node, &verdict))?;
        if !r.ok() {
            tracing::warn!("verdict on {} not recorded: status {}", verdict.file_id, r.status);
        }
        log.write_all(format::verdict_line(&verdict).as_bytes()).at(&log_path)?;
        bucket.settle(&obj, &path, verdict.is_accept())?;
    }
    agent.stop();
    let _ = beats.join();
    Ok(())
}
