//! Whole runs in the deterministic simulator.

use std::sync::OnceLock;

use swarm::config::RunConfig;
use swarm::harness::{inject_fault_with, run_checks, FaultKind};
use swarm::setup::{prepare, Setup};
use swarm::sim::{run_sim, write_outputs, Faults};
use swarm::Error;

fn setup() -> &'static Setup {
    static SETUP: OnceLock<Setup> = OnceLock::new();
    SETUP.get_or_init(|| prepare(&RunConfig::default()).unwrap())
}

fn short(steps: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run.steps = steps;
    cfg
}

#[test]
fn same_seed_gives_byte_identical_outputs() {
    let cfg = short(12);
    let (a, _) = run_sim(&cfg, setup(), Faults::default()).unwrap();
    let (b, _) = run_sim(&cfg, setup(), Faults::default()).unwrap();
    assert_eq!(a.steps_csv(), b.steps_csv());
    assert_eq!(a.metrics_csv(), b.metrics_csv());
    assert_eq!(a.consumed_log(), b.consumed_log());
    assert_eq!(a.final_params.unwrap().to_bytes(), b.final_params.unwrap().to_bytes());
}

#[test]
fn a_short_run_satisfies_the_run_invariants() {
    let cfg = short(12);
    let (out, orch) = run_sim(&cfg, setup(), Faults::default()).unwrap();
    for c in run_checks(&cfg, &out) {
        assert!(c.pass, "{}", c.line());
    }
    assert!(out.max_relay_versions <= 5, "relays held {} versions", out.max_relay_versions);
    assert!(out.steps.iter().all(|s| s.groups == cfg.train.prompts_per_step));
    let dir = tempfile::tempdir().unwrap();
    write_outputs(dir.path(), &cfg, &out, Some(&orch)).unwrap();
    for f in ["config.toml", "metrics.csv", "steps.csv", "consumed.log", "verdicts.log", "ledger.log", "final.params"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let back = swarm::sim::parse_steps_csv(&std::fs::read_to_string(dir.path().join("steps.csv")).unwrap()).unwrap();
    assert_eq!(back, out.steps);
}

#[test]
fn rollouts_come_from_the_checkpoint_k_steps_back() {
    for k in [0, 2] {
        let mut cfg = short(6);
        cfg.run.async_level = k;
        let (out, _) = run_sim(&cfg, setup(), Faults::default()).unwrap();
        for s in &out.steps {
            assert_eq!(s.rollout_version, s.step.saturating_sub(k));
        }
        for g in &out.consumed {
            assert_eq!(g.checkpoint_version, g.step.saturating_sub(k), "k={k}");
        }
    }
}

#[test]
fn no_workers_is_a_liveness_failure() {
    let mut cfg = short(3);
    cfg.workers.count = 0;
    match run_sim(&cfg, setup(), Faults::default()) {
        Err(Error::Liveness(_)) => {}
        other => panic!("expected a liveness failure, got {:?}", other.map(|o| o.0.steps.len())),
    }
}

fn fault(kind: FaultKind) {
    let (_, checks) = inject_fault_with(&RunConfig::default(), kind, setup(), None).unwrap();
    for c in &checks {
        assert!(c.pass, "{}", c.line());
    }
}

#[test]
fn crashed_worker_dies_and_rejoins() {
    fault(FaultKind::Crash);
}

#[test]
fn every_adversary_is_slashed_by_the_right_check() {
    fault(FaultKind::Adversarial);
}

#[test]
fn corrupted_shards_never_reach_a_worker() {
    fault(FaultKind::CorruptShard);
}

#[test]
fn throttled_relay_is_routed_around() {
    fault(FaultKind::ThrottledRelay);
}
