//! Relay and orchestrator processes.

use std::sync::{Arc, Mutex};

use crate::error::Result;
use crate::net::orchestrator::{serve_orchestrator, OrchState};
use crate::net::relay::{serve_relay, RelayState};
use crate::net::{base_url, bind};
use crate::setup::{owner_key, trainer_key};

use super::{announce, block_on, RoleArgs};

pub fn relay_name(index: u64) -> String {
    format!("relay-{index}")
}

pub fn run_relay(args: &RoleArgs) -> Result<()> {
    let cfg = args.config()?;
    let i = args.index as usize;
    let state = RelayState::new(
        cfg.relay_policy_of(i),
        owner_key(cfg.run.seed).address(),
        trainer_key(cfg.run.seed).address(),
        cfg.shardcast.corrupt_relays.contains(&i),
    );
    block_on(async move {
        let listener = bind(0).await?;
        announce(&args.run_dir, &relay_name(args.index), &base_url(listener.local_addr()?))?;
        serve_relay(listener, Arc::new(Mutex::new(state))).await
    })
}

pub fn run_orchestrator(args: &RoleArgs) -> Result<()> {
    let cfg = args.config()?;
    let owner = owner_key(cfg.run.seed);
    let state = Arc::new(Mutex::new(OrchState::new(owner.clone(), cfg.orchestrator_config())));
    let relays = args.relays.clone();
    block_on(async move {
        let listener = bind(0).await?;
        announce(&args.run_dir, "orchestrator", &base_url(listener.local_addr()?))?;
        serve_orchestrator(listener, state, owner, relays).await
    })
}
