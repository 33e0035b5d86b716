//! Base policy and dataset shared by every role of a run.

use std::path::Path;

use swarm_core::crypto::Keypair;
use swarm_core::pretrain::pretrain_base;
use swarm_core::rollout::{sample_completion, EOS_FLOOR};
use swarm_core::tasks::{generate_dataset, offline_filter, verify, Task};
use swarm_core::{Policy, PolicyParams, SplitMix64};

use crate::config::RunConfig;
use crate::error::{IoContext, Result};
use crate::format;

pub const BASE_FILE: &str = "base.params";
pub const DATASET_FILE: &str = "dataset.txt";

#[derive(Debug, Clone)]
pub struct Setup {
    pub base: PolicyParams,
    /// The offline-filtered training set.
    pub dataset: Vec<Task>,
}

/// Pretrains the base policy and filters the generated dataset with it.
pub fn prepare(cfg: &RunConfig) -> Result<Setup> {
    let base = pretrain_base(cfg.model_config(), &cfg.pretrain_config())?;
    let d = &cfg.data;
    let raw = generate_dataset(d.seed, d.tasks);
    let policy = Policy::new(base.clone());
    let dataset = offline_filter(&raw, &policy, d.filter_k, d.filter_low, d.filter_high, d.filter_seed);
    Ok(Setup { base, dataset })
}

/// Mean task reward of `samples` draws per task, the reference point for
/// measuring improvement.
pub fn measure_task_reward(policy: &Policy, dataset: &[Task], samples: usize, seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut total = 0.0;
    for task in dataset {
        for _ in 0..samples {
            let c = sample_completion(policy, &task.prompt_tokens, 1.0, EOS_FLOOR, &mut rng)?;
            total += verify(task, &c.output) as f64;
        }
    }
    Ok(total / (samples * dataset.len()).max(1) as f64)
}

impl Setup {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        write_atomic(&dir.join(BASE_FILE), &self.base.to_bytes())?;
        write_atomic(&dir.join(DATASET_FILE), format::encode_dataset(&self.dataset).as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(BASE_FILE);
        let base = PolicyParams::from_bytes(&std::fs::read(&p).at(&p)?)?;
        let p = dir.join(DATASET_FILE);
        let dataset = format::parse_dataset(&std::fs::read_to_string(&p).at(&p)?)?;
        Ok(Self { base, dataset })
    }
}

/// Key of the trainer (checkpoint origin) of a run.
pub fn trainer_key(seed: u64) -> Keypair {
    Keypair::derive("trainer", seed)
}

/// Key of the pool owner, who signs invites and allowlists.
pub fn owner_key(seed: u64) -> Keypair {
    Keypair::derive("pool-owner", seed)
}

/// Key of node `index` with role label `label` (`worker`, `adversary`, `validator`).
pub fn node_key(label: &str, seed: u64, index: u64) -> Keypair {
    Keypair::derive(label, seed.wrapping_mul(1000).wrapping_add(index))
}

/// Writes under a temporary name and renames, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)
}
