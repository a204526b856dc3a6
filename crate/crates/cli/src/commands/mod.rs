pub mod eval;
pub mod generate;
pub mod report;
pub mod shift;
pub mod train;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use metashift_core::meta::Trained;
use metashift_core::nn::{load_checkpoint, save_checkpoint, ArchName, ParameterSet};
use metashift_core::taskgen::{load_archive, TaskSet, MANIFEST_FILE};

use crate::artifacts::{self, write_text};
use crate::failure;

/// A task archive and the config hash it was generated with.
pub struct Archive {
    pub set: TaskSet,
    pub hash: String,
}

pub fn load_tasks(dir: &Path, what: &str) -> Result<Archive> {
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(failure::missing(format!(
            "no {what} archive at {}; run `metashift generate` first",
            dir.display()
        )));
    }
    let set = load_archive(dir).with_context(|| format!("loading {}", dir.display()))?;
    let hash = artifacts::recorded_hash(&dir.join(artifacts::DONE)).unwrap_or_default();
    Ok(Archive { set, hash })
}

/// Fails unless every task has partitions for `n`.
pub fn require_partitions(set: &TaskSet, n: usize) -> Result<()> {
    if set.tasks.iter().any(|t| t.partition(n).is_none()) {
        let have: Vec<usize> = set
            .tasks
            .first()
            .map(|t| t.partitions.keys().copied().collect())
            .unwrap_or_default();
        return Err(failure::validation(format!(
            "the archive has no partitions for N={n} (available: {have:?}); regenerate with --n-values"
        )));
    }
    Ok(())
}

pub fn member_path(dir: &Path, member: usize) -> PathBuf {
    dir.join(format!("member_{member:02}.ckpt"))
}

pub fn log_path(dir: &Path, member: usize) -> PathBuf {
    dir.join(format!("member_{member:02}_log.csv"))
}

/// Checkpoints and training logs of an ensemble.
pub fn save_members(dir: &Path, arch: ArchName, hash: &str, members: &[Trained]) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (e, m) in members.iter().enumerate() {
        let path = member_path(dir, e);
        save_checkpoint(&path, arch, &m.params)
            .with_context(|| format!("writing {}", path.display()))?;
        write_text(&log_path(dir, e), hash, &m.log.to_csv())?;
    }
    Ok(())
}

pub fn load_members(dir: &Path, arch: ArchName, count: usize) -> Result<Vec<ParameterSet>> {
    (0..count)
        .map(|e| {
            let path = member_path(dir, e);
            if !path.exists() {
                return Err(failure::missing(format!(
                    "missing checkpoint {}",
                    path.display()
                )));
            }
            let (name, params) =
                load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
            if name != arch {
                return Err(failure::validation(format!(
                    "{} holds a {name} model, expected {arch}",
                    path.display()
                )));
            }
            Ok(params)
        })
        .collect()
}
