use anyhow::{Context, Result};
use log::{info, warn};
use rayon::prelude::*;

use metashift_core::eval::{finetune_and_eval, results_csv, AccuracyRecord, FinetuneSettings};
use metashift_core::meta::Algorithm;
use metashift_core::nn::ArchitectureSpec;

use super::shift::ShiftState;
use super::train::{cell_config, dnc_dir, grid, trained_hash, Cell};
use super::{load_members, load_tasks, require_partitions, Archive};
use crate::artifacts::{config_hash, read_csv_body, recorded_hash, write_text, Layout};
use crate::config::{EvalSettings, Global, TrainSettings};

fn eval_cell(
    layout: &Layout,
    archive: &Archive,
    targets: &[usize],
    cell: &Cell,
    k: usize,
    s: &TrainSettings,
    ood: bool,
) -> Result<(std::path::PathBuf, String)> {
    let path = layout.eval(ood).join(format!("{}.csv", cell.name(Some(k))));
    let hash = config_hash(&(trained_hash(layout, cell)?, k, ood, &archive.hash));
    if recorded_hash(&path).as_deref() == Some(hash.as_str()) {
        return Ok((path, hash));
    }
    let cfg = cell_config(cell, &s.hyper);
    let spec = ArchitectureSpec::build(cell.architecture);
    let settings = FinetuneSettings {
        algorithm: cell.algorithm,
        n: cell.n,
        k,
        lr: cfg.inner_lr,
        seed: cell.seed,
    };
    let cell_dir = cell.dir(layout);
    let shared = if cell.algorithm == Algorithm::Dnc {
        None
    } else {
        Some(load_members(&cell_dir, cell.architecture, cfg.ensembles)?)
    };
    let mut jobs = Vec::new();
    for &task in targets {
        let members = match &shared {
            Some(m) => m.clone(),
            None => load_members(&dnc_dir(&cell_dir, task), cell.architecture, cfg.ensembles)?,
        };
        jobs.extend(members.into_iter().enumerate().map(|(e, p)| (task, e, p)));
    }
    let rows = jobs
        .par_iter()
        .map(|(task, e, params)| {
            let t = archive
                .set
                .tasks
                .iter()
                .find(|t| t.id == *task)
                .expect("target task exists");
            let r = finetune_and_eval(&spec, params, t, *e, &settings)
                .with_context(|| format!("evaluating {} on task {task}", cell.name(Some(k))))?;
            Ok(AccuracyRecord::from_result(
                cell.algorithm,
                cell.architecture,
                cell.sampling,
                cell.n,
                &r,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<AccuracyRecord> = rows.into_iter().flatten().collect();
    write_text(&path, &hash, &results_csv(&records))?;
    info!("{}: {} rows", cell.name(Some(k)), records.len());
    Ok((path, hash))
}

/// Fine-tunes and scores every trained cell for each K, then merges the
/// per-cell tables into one results file. With `ood` the models are scored
/// on the out-of-distribution archive instead of the test split.
pub fn run(global: &Global, s: &TrainSettings, e: &EvalSettings, ood: bool) -> Result<()> {
    let layout = Layout::new(&global.out);
    let state = ShiftState::load(&layout)?;
    let archive = if ood {
        load_tasks(&layout.ood_tasks(), "out-of-distribution")?
    } else {
        load_tasks(&layout.tasks(), "task")?
    };
    for &n in &s.n_values {
        require_partitions(&archive.set, n)?;
    }
    let targets: Vec<usize> = if ood {
        archive.set.tasks.iter().map(|t| t.id).collect()
    } else {
        state.splits.test.clone()
    };
    let mut jobs = Vec::new();
    for cell in grid(s) {
        if ood && cell.algorithm == Algorithm::Dnc {
            warn!(
                "{}: D&C models are task-specific and are not scored out of distribution",
                cell.name(None)
            );
            continue;
        }
        for &k in &e.k_values {
            jobs.push((cell, k));
        }
    }
    let outputs = jobs
        .par_iter()
        .map(|(cell, k)| eval_cell(&layout, &archive, &targets, cell, *k, s, ood))
        .collect::<Result<Vec<_>>>()?;

    let mut body = String::new();
    let mut hashes = Vec::new();
    for (i, (path, hash)) in outputs.iter().enumerate() {
        let text = read_csv_body(path)?;
        let mut lines = text.lines();
        let head = lines.next().unwrap_or_default();
        if i == 0 {
            body.push_str(head);
            body.push('\n');
        }
        for l in lines {
            body.push_str(l);
            body.push('\n');
        }
        hashes.push(hash.clone());
    }
    if body.is_empty() {
        body = format!("{}\n", AccuracyRecord::CSV_HEADER);
    }
    let results = layout.results(ood);
    write_text(&results, &config_hash(&hashes), &body)?;
    info!("wrote {}", results.display());
    Ok(())
}
