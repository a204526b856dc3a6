use std::fmt::Write as _;

use anyhow::{Context, Result};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use metashift_core::meta::{run_ensemble, Algorithm, Target};
use metashift_core::nn::ArchitectureSpec;
use metashift_core::seed::{self, stream};
use metashift_core::shift::{
    assign_splits, compute_pu, cross_accuracy, diversity_weights, matrix_csv, pairwise_similarity,
    similarity_accuracy_bins, similarity_to_distance, submatrix, symmetrize_accuracy,
    uniform_weights, ward_cluster, DMatrix, SplitAssignment,
};
use metashift_core::stats;
use metashift_core::taskgen::TaskSetKind;

use super::{load_members, load_tasks, require_partitions, save_members};
use crate::artifacts::{config_hash, is_done, mark_done, write_text, Layout};
use crate::config::{Global, ShiftSettings, TrainHyper};
use crate::failure;

/// Everything later stages need from the shift analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftState {
    pub hash: String,
    pub ids: Vec<usize>,
    pub n: usize,
    pub accuracy: Vec<Vec<f64>>,
    pub pu: Vec<f64>,
    pub similarity: Vec<Vec<f64>>,
    pub distance: Vec<Vec<f64>>,
    pub splits: SplitAssignment,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl ShiftState {
    pub fn load(layout: &Layout) -> Result<Self> {
        let path = layout.shift_state();
        if !path.exists() {
            return Err(failure::missing(format!(
                "no shift analysis at {}; run `metashift shift` first",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Distances indexed by task id.
    pub fn distance_matrix(&self) -> DMatrix<f64> {
        let n = self.distance.len();
        DMatrix::from_fn(n, n, |u, v| self.distance[u][v])
    }
}

fn model_hash(global: &Global, s: &ShiftSettings, hyper: &TrainHyper, tasks_hash: &str) -> String {
    config_hash(&(
        "task-specific",
        global.seed,
        s.n,
        s.ensembles,
        s.architecture,
        hyper,
        tasks_hash,
    ))
}

/// Trains `ensembles` D&C-style models on every task of the archive.
/// Tasks whose models are complete are skipped.
pub fn train_task_models(global: &Global, s: &ShiftSettings, hyper: &TrainHyper) -> Result<()> {
    let layout = Layout::new(&global.out);
    let archive = load_tasks(&layout.tasks(), "task")?;
    require_partitions(&archive.set, s.n)?;
    let hash = model_hash(global, s, hyper, &archive.hash);
    archive
        .set
        .tasks
        .par_iter()
        .try_for_each(|task| -> Result<()> {
            let dir = layout
                .task_model(task.id, 0)
                .parent()
                .unwrap()
                .to_path_buf();
            if is_done(&dir, &hash) {
                return Ok(());
            }
            let mut cfg = hyper.meta_config(
                Algorithm::Dnc,
                s.architecture,
                s.n,
                seed::derive_path(global.seed, &[stream::TASK, task.id as u64]),
            );
            cfg.ensembles = s.ensembles;
            let members = run_ensemble(&cfg, &archive.set, Target::Task(task.id))
                .with_context(|| format!("training task-specific models for task {}", task.id))?;
            save_members(&dir, s.architecture, &hash, &members)?;
            mark_done(&dir, &hash)?;
            info!("task {}: trained {} models", task.id, members.len());
            Ok(())
        })
}

fn weights_csv(ids: &[usize], w: &[f64]) -> String {
    let mut s = String::from("task,gamma\n");
    for (id, g) in ids.iter().zip(w) {
        let _ = writeln!(s, "{id},{g:.9}");
    }
    s
}

/// Cross-task accuracy, p_u, CKA similarity, Ward dendrogram, test/pool
/// split and pool sampling weights from the task-specific models.
pub fn run(global: &Global, s: &ShiftSettings, hyper: &TrainHyper) -> Result<()> {
    let layout = Layout::new(&global.out);
    let archive = load_tasks(&layout.tasks(), "task")?;
    let set = &archive.set;
    if set.kind() != TaskSetKind::Factorial {
        return Err(failure::validation(
            "shift analysis needs a factorial task archive",
        ));
    }
    require_partitions(set, s.n)?;
    let model_hash = model_hash(global, s, hyper, &archive.hash);
    let absent: Vec<usize> = set
        .tasks
        .iter()
        .filter(|t| !is_done(layout.task_model(t.id, 0).parent().unwrap(), &model_hash))
        .map(|t| t.id)
        .collect();
    if !absent.is_empty() {
        return Err(failure::missing(format!(
            "task-specific models are missing or stale for tasks {absent:?}; run `metashift train --task-specific` with the same shift settings"
        )));
    }
    let spec = ArchitectureSpec::build(s.architecture);
    let ensembles = set
        .tasks
        .iter()
        .map(|t| {
            load_members(
                layout.task_model(t.id, 0).parent().unwrap(),
                s.architecture,
                s.ensembles,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let data: Vec<_> = set
        .tasks
        .iter()
        .map(|t| t.batch(&t.partition(s.n).expect("checked").holdout))
        .collect();
    let ids: Vec<usize> = set.tasks.iter().map(|t| t.id).collect();

    let a = cross_accuracy(&spec, &ensembles, &data)?;
    let pu = compute_pu(&a)?;
    let inputs: Vec<Vec<&[f32]>> = data.iter().map(|d| d.0.clone()).collect();
    let sim = pairwise_similarity(&spec, &ensembles, &inputs)?;
    let dist = similarity_to_distance(&sim);
    let dend = ward_cluster(&dist)?;
    let splits = assign_splits(&dend, &ids)?;
    let pool_dend = ward_cluster(&submatrix(&dist, &splits.pool))?;
    let bins = similarity_accuracy_bins(&sim, &symmetrize_accuracy(&a), s.bins);

    let hash = config_hash(&(&model_hash, s));
    let dir = layout.shift();
    write_text(&dir.join("accuracy.csv"), &hash, &matrix_csv(&ids, &a))?;
    write_text(&dir.join("similarity.csv"), &hash, &matrix_csv(&ids, &sim))?;
    write_text(&dir.join("distance.csv"), &hash, &matrix_csv(&ids, &dist))?;
    write_text(&dir.join("dendrogram.txt"), &hash, &dend.to_text())?;
    let mut pu_csv = String::from("task,p_u\n");
    for (id, p) in ids.iter().zip(&pu) {
        let _ = writeln!(pu_csv, "{id},{p:.9}");
    }
    write_text(&dir.join("pu.csv"), &hash, &pu_csv)?;
    let mut split_csv = String::from("task,split\n");
    for (name, list) in [
        ("test", &splits.test),
        ("train_a", &splits.train_a),
        ("train_b", &splits.train_b),
    ] {
        for id in list {
            let _ = writeln!(split_csv, "{id},{name}");
        }
    }
    write_text(&dir.join("splits.csv"), &hash, &split_csv)?;
    write_text(
        &dir.join("weights_uniform.csv"),
        &hash,
        &weights_csv(&splits.pool, &uniform_weights(splits.pool.len())),
    )?;
    write_text(
        &dir.join("weights_diverse.csv"),
        &hash,
        &weights_csv(&splits.pool, &diversity_weights(&pool_dend)),
    )?;
    let mut bin_csv =
        String::from("bin,mean_similarity,mean_accuracy,standardized_accuracy,count\n");
    for (i, b) in bins.iter().enumerate() {
        let _ = writeln!(
            bin_csv,
            "{i},{:.9},{:.9},{:.9},{}",
            b.mean_similarity, b.mean_accuracy, b.standardized_accuracy, b.count
        );
    }
    write_text(&dir.join("similarity_bins.csv"), &hash, &bin_csv)?;

    let state = ShiftState {
        hash: hash.clone(),
        ids,
        n: s.n,
        accuracy: rows(&a),
        pu: pu.clone(),
        similarity: rows(&sim),
        distance: rows(&dist),
        splits,
    };
    let json = serde_json::to_string_pretty(&state)?;
    metashift_core::binio::write_atomic(&layout.shift_state(), json.as_bytes())
        .with_context(|| format!("writing {}", layout.shift_state().display()))?;
    let (ks, p) = stats::ks_uniform(&pu);
    info!(
        "p_u: KS statistic {ks:.3} (p = {p:.2e}); test {} tasks, pool {}",
        state.splits.test.len(),
        state.splits.pool.len()
    );
    Ok(())
}
