use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use metashift_core::meta::{run_ensemble, Algorithm, MetaConfig, MetaSplit, Sampling, Target};
use metashift_core::nn::ArchName;
use metashift_core::seed::{self, stream};
use metashift_core::shift::{
    diversity_weights, select_validation_diverse, select_validation_uniform, submatrix,
    uniform_weights, ward_cluster,
};
use metashift_core::taskgen::TaskSet;

use super::shift::ShiftState;
use super::{load_tasks, require_partitions, save_members};
use crate::artifacts::{config_hash, is_done, mark_done, recorded_hash, write_text, Layout, DONE};
use crate::config::{Global, TrainHyper, TrainSettings};
use crate::failure;

/// One point of the training grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Cell {
    pub algorithm: Algorithm,
    pub architecture: ArchName,
    pub n: usize,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Cell {
    /// Stable key of the cell and, for evaluation outputs, a K value.
    pub fn key(&self, k: Option<usize>) -> String {
        config_hash(&(
            self.algorithm.as_str(),
            self.architecture.as_str(),
            self.n,
            k,
            self.sampling.as_str(),
            self.seed,
        ))[..12]
            .to_string()
    }

    pub fn name(&self, k: Option<usize>) -> String {
        let mut s = format!(
            "{}-{}-n{}-{}-s{}",
            self.algorithm, self.architecture, self.n, self.sampling, self.seed
        );
        if let Some(k) = k {
            let _ = write!(s, "-k{k}");
        }
        let _ = write!(s, "-{}", self.key(k));
        s
    }

    pub fn dir(&self, layout: &Layout) -> PathBuf {
        layout.train().join(self.name(None))
    }
}

/// Grid cells in a fixed order. TDL and D&C do not sample tasks, so they
/// get uniform cells only.
pub fn grid(s: &TrainSettings) -> Vec<Cell> {
    let mut out = Vec::new();
    for &algorithm in &s.algorithms {
        for &architecture in &s.architectures {
            for &n in &s.n_values {
                for &sampling in &s.samplings {
                    if !algorithm.is_meta() && sampling != Sampling::Uniform {
                        continue;
                    }
                    for &seed in &s.seeds {
                        out.push(Cell {
                            algorithm,
                            architecture,
                            n,
                            sampling,
                            seed,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Validation tasks and sampling weights of a meta-learning cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub weights: Vec<f64>,
}

pub fn meta_split(
    state: &ShiftState,
    sampling: Sampling,
    fraction: f64,
    seed: u64,
) -> Result<TaskSplit> {
    let mut rng = seed::rng_at(seed, &[stream::SPLIT]);
    let d = state.distance_matrix();
    let pool = &state.splits.pool;
    let (train, validation) = match sampling {
        Sampling::Uniform => select_validation_uniform(pool, fraction, &mut rng)?,
        Sampling::Diverse => select_validation_diverse(pool, fraction, &d, &mut rng)?,
    };
    let weights = match sampling {
        Sampling::Uniform => uniform_weights(train.len()),
        Sampling::Diverse if train.len() == 1 => vec![1.0],
        Sampling::Diverse => diversity_weights(&ward_cluster(&submatrix(&d, &train))?),
    };
    Ok(TaskSplit {
        train,
        validation,
        weights,
    })
}

pub fn cell_config(cell: &Cell, hyper: &TrainHyper) -> MetaConfig {
    let mut c = hyper.meta_config(cell.algorithm, cell.architecture, cell.n, cell.seed);
    c.sampling = cell.sampling;
    c
}

/// Per-task model directory of a D&C cell.
pub fn dnc_dir(cell_dir: &Path, task: usize) -> PathBuf {
    cell_dir.join(format!("task_{task:03}"))
}

fn cell_hash(cell: &Cell, hyper: &TrainHyper, state: &ShiftState) -> String {
    config_hash(&(cell, hyper, &state.hash))
}

fn train_cell(
    layout: &Layout,
    set: &TaskSet,
    state: &ShiftState,
    cell: &Cell,
    hyper: &TrainHyper,
) -> Result<()> {
    let dir = cell.dir(layout);
    let hash = cell_hash(cell, hyper, state);
    if is_done(&dir, &hash) {
        info!("{}: done, skipping", cell.name(None));
        return Ok(());
    }
    let cfg = cell_config(cell, hyper);
    match cell.algorithm {
        Algorithm::Reptile | Algorithm::Fomaml => {
            let split = meta_split(state, cell.sampling, hyper.validation_fraction, cell.seed)?;
            let mut csv = String::from("task,role,gamma\n");
            for (id, g) in split.train.iter().zip(&split.weights) {
                let _ = writeln!(csv, "{id},train,{g:.9}");
            }
            for id in &split.validation {
                let _ = writeln!(csv, "{id},validation,");
            }
            write_text(&dir.join("split.csv"), &hash, &csv)?;
            let target = Target::Meta(MetaSplit {
                train: &split.train,
                validation: &split.validation,
                weights: &split.weights,
            });
            let members = run_ensemble(&cfg, set, target)
                .with_context(|| format!("training {}", cell.name(None)))?;
            save_members(&dir, cell.architecture, &hash, &members)?;
        }
        Algorithm::Tdl => {
            let members = run_ensemble(&cfg, set, Target::Pool(&state.splits.pool))
                .with_context(|| format!("training {}", cell.name(None)))?;
            save_members(&dir, cell.architecture, &hash, &members)?;
        }
        Algorithm::Dnc => {
            for &id in &state.splits.test {
                let mut c = cfg.clone();
                c.seed = seed::derive_path(cell.seed, &[stream::TASK, id as u64]);
                let members = run_ensemble(&c, set, Target::Task(id))
                    .with_context(|| format!("training {} on task {id}", cell.name(None)))?;
                save_members(&dnc_dir(&dir, id), cell.architecture, &hash, &members)?;
            }
        }
    }
    mark_done(&dir, &hash)?;
    info!("{}: trained", cell.name(None));
    Ok(())
}

/// Trains every grid cell that is not already complete.
pub fn run(global: &Global, s: &TrainSettings) -> Result<()> {
    let layout = Layout::new(&global.out);
    let archive = load_tasks(&layout.tasks(), "task")?;
    let state = ShiftState::load(&layout)?;
    if state.ids.len() != archive.set.tasks.len() {
        return Err(failure::validation(
            "the shift analysis does not match the task archive; rerun `metashift shift`",
        ));
    }
    for &n in &s.n_values {
        require_partitions(&archive.set, n)?;
    }
    let cells = grid(s);
    cells
        .par_iter()
        .try_for_each(|cell| train_cell(&layout, &archive.set, &state, cell, &s.hyper))
}

/// The completion hash of a trained cell.
pub fn trained_hash(layout: &Layout, cell: &Cell) -> Result<String> {
    let marker = cell.dir(layout).join(DONE);
    recorded_hash(&marker).ok_or_else(|| {
        failure::missing(format!(
            "cell {} has not been trained; run `metashift train` with the same grid",
            cell.name(None)
        ))
    })
}
