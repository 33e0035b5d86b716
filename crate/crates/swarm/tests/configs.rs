//! The sample configs shipped with the repository.

use std::path::Path;

use swarm::config::{Mode, RunConfig};

fn load(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let cfg = RunConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    cfg
}

#[test]
fn toy_config_is_the_default() {
    assert_eq!(load("toy.toml"), RunConfig::default());
}

#[test]
fn process_config_runs_networked() {
    assert_eq!(load("process.toml").run.mode, Mode::Process);
}
