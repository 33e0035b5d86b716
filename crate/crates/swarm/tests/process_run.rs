//! Networked runs: every role a child process on loopback HTTP.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use swarm::config::{Mode, RunConfig};
use swarm::harness::{run_checks, run_processes};
use swarm::roles::worker::worker_key;
use swarm::setup::{prepare, Setup};
use swarm::Error;

fn exe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_swarm"))
}

fn setup() -> &'static Setup {
    static SETUP: OnceLock<Setup> = OnceLock::new();
    SETUP.get_or_init(|| prepare(&RunConfig::default()).unwrap())
}

fn config(steps: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run.mode = Mode::Process;
    cfg.run.steps = steps;
    cfg.run.timeout_secs = 120;
    cfg.orchestrator.heartbeat_interval_ms = 200;
    cfg
}

/// Processes still running with `dir` on their command line.
fn survivors(dir: &Path) -> Vec<String> {
    let needle = dir.to_string_lossy().into_owned();
    std::fs::read_dir("/proc")
        .map(|d| {
            d.flatten()
                .filter_map(|e| std::fs::read(e.path().join("cmdline")).ok())
                .map(|c| String::from_utf8_lossy(&c).replace('\0', " "))
                .filter(|c| c.contains(&needle) && c.contains(" node "))
                .collect()
        })
        .unwrap_or_default()
}

#[test]
fn networked_run_completes_and_is_reproducible() {
    let cfg = config(5);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let out = run_processes(&exe(), &cfg, setup(), a.path()).unwrap();
    for c in run_checks(&cfg, &out) {
        assert!(c.pass, "{}", c.line());
    }
    assert!(out.verdicts.iter().all(|v| v.is_accept()));
    assert!(out.verdicts.len() >= out.steps.iter().map(|s| s.files).sum::<usize>());
    run_processes(&exe(), &cfg, setup(), b.path()).unwrap();
    for f in ["steps.csv", "metrics.csv", "consumed.log", "final.params"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
    assert!(survivors(a.path()).is_empty());
}

#[test]
fn networked_adversary_is_slashed() {
    let mut cfg = config(4);
    cfg.workers.adversarial = vec!["forged-reward".into()];
    let dir = tempfile::tempdir().unwrap();
    let out = run_processes(&exe(), &cfg, setup(), dir.path()).unwrap();
    assert_eq!(out.slashed, vec![worker_key(&cfg, 0, true).address()]);
    assert!(out.ledger_valid);
    let rejected: Vec<_> = out.verdicts.iter().filter(|v| !v.is_accept()).collect();
    assert!(!rejected.is_empty());
    assert!(rejected.iter().all(|v| v.failed_check == Some(swarm_core::validate::FailedCheck::Bounds)));
    assert_eq!(out.steps.len(), 4);
}

#[test]
fn no_workers_reports_liveness_and_leaves_no_processes() {
    let mut cfg = config(2);
    cfg.workers.count = 0;
    cfg.run.timeout_secs = 2;
    let dir = tempfile::tempdir().unwrap();
    match run_processes(&exe(), &cfg, setup(), dir.path()) {
        Err(Error::Liveness(_)) => {}
        other => panic!("expected a liveness failure, got {:?}", other.map(|o| o.steps.len())),
    }
    assert!(survivors(dir.path()).is_empty(), "{:?}", survivors(dir.path()));
}
