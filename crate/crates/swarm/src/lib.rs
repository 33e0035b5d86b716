//! Networked and simulated runs of the decentralized RL pipeline.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod broadcast;
pub mod bucket;
pub mod config;
pub mod error;
pub mod format;
pub mod harness;
pub mod net;
pub mod plot;
pub mod roles;
pub mod setup;
pub mod sim;

pub use error::{Error, Result};
