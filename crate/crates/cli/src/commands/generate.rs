use anyhow::{Context, Result};
use log::info;

use metashift_core::seed::{self, stream};
use metashift_core::taskgen::{generate_ood_taskset, generate_taskset, save_archive, Design};

use crate::artifacts::{config_hash, mark_done, Layout};
use crate::config::{GenerateSettings, Global, TaskChoice};
use crate::failure;

/// Generates, partitions and stores a task archive. Out-of-distribution
/// tasks go to their own directory.
pub fn run(global: &Global, s: &GenerateSettings, force: bool) -> Result<()> {
    let layout = Layout::new(&global.out);
    let dir = if s.tasks == TaskChoice::Ood {
        layout.ood_tasks()
    } else {
        layout.tasks()
    };
    let occupied = dir
        .read_dir()
        .map(|mut d| d.next().is_some())
        .unwrap_or(false);
    if occupied {
        if !force {
            return Err(failure::validation(format!(
                "{} already exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(&dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    let mut set = match s.tasks {
        TaskChoice::Full => generate_taskset(Design::Full, s.reps, s.samples, global.seed)?,
        TaskChoice::Mini => generate_taskset(Design::Desk, s.reps, s.samples, global.seed)?,
        TaskChoice::Ood => generate_ood_taskset(s.ood_bins, s.reps, s.samples, global.seed)?,
    };
    set.partition_all(&s.n_values, seed::derive(global.seed, stream::PARTITION))?;
    save_archive(&set, &dir)?;
    mark_done(&dir, &config_hash(&(global.seed, s)))?;
    info!("wrote {} tasks to {}", set.tasks.len(), dir.display());
    Ok(())
}
