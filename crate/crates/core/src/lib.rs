//! Deterministic core of an asynchronous, decentralized RL training fabric.
//!
//! Everything in this crate is pure computation over owned values: the toy
//! policy network and its GRPO mathematics, the arithmetic task suite, rollout
//! generation and interval commitments, the validator checks, checkpoint
//! sharding and relay selection, the orchestrator state machine and its
//! hash-chained ledger, and the trainer's batch discipline. Time is always an
//! explicit argument, so every component can be driven by a simulated clock.
//!
//! The crate is `no_std` (with `alloc`). Transcendental functions come from
//! `libm`, which keeps forward passes bit-identical across hosts.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod adversary;
pub mod crypto;
pub mod error;
pub mod grad;
pub mod grpo;
pub mod ledger;
pub mod model;
pub mod orchestrator;
pub mod pretrain;
pub mod rng;
pub mod rollout;
pub mod shardcast;
pub mod tasks;
pub mod trainer;
pub mod validate;

pub use error::{Error, Result};
pub use model::{ModelConfig, Policy, PolicyParams, TokenDist, TokenId};
pub use rng::SplitMix64;
