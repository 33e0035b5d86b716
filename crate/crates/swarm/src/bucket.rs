//! Directory-backed object store for rollout files. Uploads land under
//! `incoming/step-N/`; a validator claims one by renaming it into its own
//! `claimed/` directory, then files it under `accepted/step-N/` or
//! `rejected/step-N/`. Renames are atomic, so two validators never judge
//! the same upload.

use std::path::{Path, PathBuf};

use swarm_core::crypto::Address;

use crate::error::{IoContext, Result};
use crate::setup::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectKey {
    pub step: u64,
    pub node: Address,
    pub submission: u64,
}

impl ObjectKey {
    pub fn file_name(&self) -> String {
        format!("{}-{}.txt", self.node.to_hex(), self.submission)
    }

    fn parse(step: u64, name: &str) -> Option<Self> {
        let stem = name.strip_suffix(".txt")?;
        let (node, sub) = stem.rsplit_once('-')?;
        Some(Self { step, node: Address::from_hex(node).ok()?, submission: sub.parse().ok()? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectState {
    Missing,
    Pending,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone)]
pub struct Bucket {
    pub root: PathBuf,
}

fn step_dir(step: u64) -> String {
    format!("step-{step}")
}

impl Bucket {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn path(&self, prefix: &str, key: &ObjectKey) -> PathBuf {
        self.root.join(prefix).join(step_dir(key.step)).join(key.file_name())
    }

    pub fn put(&self, key: &ObjectKey, bytes: &[u8]) -> Result<()> {
        let p = self.path("incoming", key);
        let dir = p.parent().unwrap();
        std::fs::create_dir_all(dir).at(dir)?;
        write_atomic(&p, bytes)
    }

    pub fn state(&self, key: &ObjectKey) -> ObjectState {
        if self.path("accepted", key).exists() {
            ObjectState::Accepted
        } else if self.path("rejected", key).exists() {
            ObjectState::Rejected
        } else if self.path("incoming", key).exists() || self.claimed_path(key).is_some() {
            ObjectState::Pending
        } else {
            ObjectState::Missing
        }
    }

    fn claimed_path(&self, key: &ObjectKey) -> Option<PathBuf> {
        let dir = self.root.join("claimed");
        let name = format!("{}-{}", step_dir(key.step), key.file_name());
        std::fs::read_dir(&dir).ok()?.flatten().map(|e| e.path().join(&name)).find(|p| p.exists())
    }

    pub fn read_accepted(&self, key: &ObjectKey) -> Result<Vec<u8>> {
        let p = self.path("accepted", key);
        std::fs::read(&p).at(&p)
    }

    /// Oldest unclaimed upload, now owned by `claimer`.
    pub fn claim(&self, claimer: &str) -> Result<Option<(ObjectKey, PathBuf)>> {
        let incoming = self.root.join("incoming");
        let mine = self.root.join("claimed").join(claimer);
        std::fs::create_dir_all(&mine).at(&mine)?;
        let Ok(steps) = std::fs::read_dir(&incoming) else {
            return Ok(None);
        };
        let mut steps: Vec<(u64, PathBuf)> = steps
            .flatten()
            .filter_map(|e| Some((e.file_name().to_str()?.strip_prefix("step-")?.parse().ok()?, e.path())))
            .collect();
        steps.sort();
        for (step, dir) in steps {
            let mut names: Vec<String> = std::fs::read_dir(&dir)
                .map(|d| d.flatten().filter_map(|e| e.file_name().into_string().ok()).filter(|n| n.ends_with(".txt")).collect())
                .unwrap_or_default();
            names.sort();
            for name in names {
                let Some(key) = ObjectKey::parse(step, &name) else { continue };
                let to = mine.join(format!("{}-{name}", step_dir(step)));
                if std::fs::rename(dir.join(&name), &to).is_ok() {
                    return Ok(Some((key, to)));
                }
            }
        }
        Ok(None)
    }

    /// Files a claimed upload under its verdict.
    pub fn settle(&self, key: &ObjectKey, claimed: &Path, accepted: bool) -> Result<()> {
        let to = self.path(if accepted { "accepted" } else { "rejected" }, key);
        let dir = to.parent().unwrap();
        std::fs::create_dir_all(dir).at(dir)?;
        std::fs::rename(claimed, &to).at(&to)
    }
}
