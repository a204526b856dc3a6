use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::steps::{
    draw_pairs, fomaml_meta_gradient, inner_adapt, reptile_meta_gradient, stratified_split, Episode,
};
use super::{Algorithm, EarlyStopState, EpochRecord, MetaConfig, MetaError, Result, TrainLog};
use crate::nn::{
    adam_step, bce_with_logits, init_params, predict_logits, value_and_grad, AdamState,
    ArchitectureSpec, NnError, ParameterSet,
};
use crate::seed::{self, stream};
use crate::shift::sample_task_batch;
use crate::taskgen::{Partitions, Task, TaskSet};

/// Task lists for the meta-learners. `weights` are the sampling weights of
/// the `train` tasks, in the same order.
#[derive(Debug, Clone, Copy)]
pub struct MetaSplit<'a> {
    pub train: &'a [usize],
    pub validation: &'a [usize],
    pub weights: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    /// Parameters at the best validation epoch.
    pub params: ParameterSet,
    /// Parameters after the last epoch run.
    pub last: ParameterSet,
    pub log: TrainLog,
}

fn task_by_id(set: &TaskSet, id: usize) -> Result<&Task> {
    set.tasks
        .get(id)
        .filter(|t| t.id == id)
        .or_else(|| set.tasks.iter().find(|t| t.id == id))
        .ok_or_else(|| MetaError::Config(format!("task {id} is not in the task set")))
}

fn partitions(task: &Task, n: usize) -> Result<&Partitions> {
    task.partition(n)
        .ok_or(MetaError::MissingPartition { task: task.id, n })
}

/// Mean binary cross-entropy without gradients.
pub(crate) fn mean_loss(
    spec: &ArchitectureSpec,
    params: &ParameterSet,
    ep: &Episode<'_>,
) -> Result<f64> {
    if ep.is_empty() {
        return Err(MetaError::Empty("validation data"));
    }
    let logits = predict_logits(spec, params, &ep.inputs)?;
    let total: f64 = logits
        .iter()
        .zip(&ep.labels)
        .map(|(&z, &y)| bce_with_logits(z as f64, y as f64))
        .sum();
    Ok(total / ep.len() as f64)
}

/// Runs epochs until the validation loss has not improved for `patience`
/// epochs (or `max_epochs` is reached) and returns the best parameters.
fn run_epochs(
    cfg: &MetaConfig,
    mut params: ParameterSet,
    mut epoch: impl FnMut(&mut ParameterSet, &mut AdamState) -> Result<usize>,
    mut validate: impl FnMut(&ParameterSet) -> Result<f64>,
) -> Result<Trained> {
    let start = Instant::now();
    let mut adam = AdamState::new(&params);
    let mut stop = EarlyStopState::new(cfg.patience);
    let mut best = params.clone();
    let mut records = Vec::new();
    for e in 1..=cfg.max_epochs {
        let steps = epoch(&mut params, &mut adam)?;
        let val_loss = validate(&params)?;
        if !val_loss.is_finite() {
            return Err(NnError::NonFinite("validation loss").into());
        }
        records.push(EpochRecord {
            epoch: e,
            val_loss,
            pseudo_epochs: steps,
            seconds: start.elapsed().as_secs_f64(),
        });
        if stop.update(e, val_loss) {
            best.clone_from(&params);
        }
        if stop.should_stop() {
            break;
        }
    }
    Ok(Trained {
        params: best,
        last: params,
        log: TrainLog {
            epochs: records,
            best_epoch: stop.best_epoch,
            best_val_loss: stop.best,
        },
    })
}

struct ValTask<'a> {
    support: Episode<'a>,
    query: Episode<'a>,
}

fn meta_validation<'a>(set: &'a TaskSet, ids: &[usize], n: usize) -> Result<Vec<ValTask<'a>>> {
    if ids.is_empty() {
        return Err(MetaError::Empty("validation split"));
    }
    ids.iter()
        .map(|&id| {
            let t = task_by_id(set, id)?;
            let p = partitions(t, n)?;
            Ok(ValTask {
                support: Episode::from_task(t, &p.support),
                query: Episode::from_task(t, &p.query),
            })
        })
        .collect()
}

/// Mean over validation tasks of the query loss after adapting on the
/// support set, scaled by `1 / (2N)`.
fn meta_val_loss(
    spec: &ArchitectureSpec,
    cfg: &MetaConfig,
    phi: &ParameterSet,
    val: &[ValTask<'_>],
    steps: usize,
) -> Result<f64> {
    let losses = val
        .par_iter()
        .map(|v| {
            let theta = inner_adapt(spec, phi, &v.support, steps, cfg.inner_lr)?;
            mean_loss(spec, &theta, &v.query)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64 / (2 * cfg.n) as f64)
}

struct MetaTrainTask<'a> {
    task: &'a Task,
    pool: Vec<usize>,
}

fn meta_train_tasks<'a>(
    set: &'a TaskSet,
    split: &MetaSplit<'_>,
    n: usize,
) -> Result<Vec<MetaTrainTask<'a>>> {
    if split.train.is_empty() {
        return Err(MetaError::Empty("training split"));
    }
    if split.weights.len() != split.train.len() {
        return Err(MetaError::Config(format!(
            "{} sampling weights for {} training tasks",
            split.weights.len(),
            split.train.len()
        )));
    }
    split
        .train
        .iter()
        .map(|&id| {
            let task = task_by_id(set, id)?;
            Ok(MetaTrainTask {
                task,
                pool: partitions(task, n)?.support_query(),
            })
        })
        .collect()
}

fn check_algorithm(cfg: &MetaConfig, expected: Algorithm) -> Result<()> {
    cfg.validate()?;
    if cfg.algorithm != expected {
        return Err(MetaError::Config(format!(
            "{} trainer called with algorithm {}",
            expected, cfg.algorithm
        )));
    }
    Ok(())
}

/// Reptile. Each pseudo-epoch samples a task batch by the split weights,
/// adapts to `N` fresh pairs per class from each task's support and query
/// partitions, and takes one Adam step along the mean displacement.
pub fn reptile_train(
    cfg: &MetaConfig,
    set: &TaskSet,
    split: &MetaSplit<'_>,
    seed: u64,
) -> Result<Trained> {
    check_algorithm(cfg, Algorithm::Reptile)?;
    let spec = ArchitectureSpec::build(cfg.architecture);
    let tasks = meta_train_tasks(set, split, cfg.n)?;
    let val = meta_validation(set, split.validation, cfg.n)?;
    let mut rng = seed::rng_at(seed, &[stream::EPISODE]);
    let pseudo = tasks.len().div_ceil(cfg.task_batch);
    let batch = cfg.task_batch.min(tasks.len());
    let positions: Vec<usize> = (0..tasks.len()).collect();
    run_epochs(
        cfg,
        init_params(&spec, seed::derive(seed, stream::INIT)),
        |phi, adam| {
            for _ in 0..pseudo {
                let picks = sample_task_batch(&positions, split.weights, batch, &mut rng)?;
                let episodes = picks
                    .iter()
                    .map(|&k| {
                        let t = &tasks[k];
                        Ok(Episode::from_task(
                            t.task,
                            &draw_pairs(t.task, &t.pool, cfg.n, &mut rng)?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let g =
                    reptile_meta_gradient(&spec, phi, &episodes, cfg.inner_steps, cfg.inner_lr)?;
                adam_step(phi, &g, adam, cfg.outer_lr)?;
            }
            Ok(pseudo)
        },
        |phi| meta_val_loss(&spec, cfg, phi, &val, cfg.inner_steps),
    )
}

/// First-order MAML. Each task in a batch contributes disjoint support and
/// query draws of `N` pairs per class; the query-loss gradient at the
/// one-step adapted parameters is averaged and applied to `phi` by Adam.
pub fn fomaml_train(
    cfg: &MetaConfig,
    set: &TaskSet,
    split: &MetaSplit<'_>,
    seed: u64,
) -> Result<Trained> {
    check_algorithm(cfg, Algorithm::Fomaml)?;
    let spec = ArchitectureSpec::build(cfg.architecture);
    let tasks = meta_train_tasks(set, split, cfg.n)?;
    let val = meta_validation(set, split.validation, cfg.n)?;
    let mut rng = seed::rng_at(seed, &[stream::EPISODE]);
    let pseudo = tasks.len().div_ceil(cfg.task_batch);
    let batch = cfg.task_batch.min(tasks.len());
    let positions: Vec<usize> = (0..tasks.len()).collect();
    let n = cfg.n;
    run_epochs(
        cfg,
        init_params(&spec, seed::derive(seed, stream::INIT)),
        |phi, adam| {
            for _ in 0..pseudo {
                let picks = sample_task_batch(&positions, split.weights, batch, &mut rng)?;
                let episodes = picks
                    .iter()
                    .map(|&k| {
                        let t = &tasks[k];
                        let both = draw_pairs(t.task, &t.pool, 2 * n, &mut rng)?;
                        Ok((
                            Episode::from_task(t.task, &both[..2 * n]),
                            Episode::from_task(t.task, &both[2 * n..]),
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (_, g) = fomaml_meta_gradient(&spec, phi, &episodes, cfg.inner_lr)?;
                adam_step(phi, &g, adam, cfg.outer_lr)?;
            }
            Ok(pseudo)
        },
        |phi| meta_val_loss(&spec, cfg, phi, &val, 1),
    )
}

/// Mini-batch Adam over a fixed sample list, reshuffled every epoch, with
/// early stopping on the plain mean loss of a held-out list.
fn supervised_train(
    cfg: &MetaConfig,
    set_tasks: &[&Task],
    train: Vec<(usize, usize)>,
    val: Vec<(usize, usize)>,
    seed: u64,
) -> Result<Trained> {
    if train.is_empty() {
        return Err(MetaError::Empty("training data"));
    }
    let spec = ArchitectureSpec::build(cfg.architecture);
    let gather = |items: &[(usize, usize)]| Episode {
        inputs: items
            .iter()
            .map(|&(t, i)| set_tasks[t].waveform(i))
            .collect(),
        labels: items.iter().map(|&(t, i)| set_tasks[t].labels[i]).collect(),
    };
    let val_ep = gather(&val);
    let mut order = train;
    let mut rng = seed::rng_at(seed, &[stream::SHUFFLE]);
    let steps = order.len().div_ceil(cfg.batch_size);
    run_epochs(
        cfg,
        init_params(&spec, seed::derive(seed, stream::INIT)),
        |params, adam| {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let ep = gather(chunk);
                let (_, g) = value_and_grad(&spec, params, &ep.inputs, &ep.labels)?;
                adam_step(params, &g, adam, cfg.outer_lr)?;
            }
            Ok(steps)
        },
        |params| mean_loss(&spec, params, &val_ep),
    )
}

/// Pooled task-agnostic training. Every pool task contributes `N` pairs per
/// class from its support and query partitions, split per class into
/// training and validation samples.
pub fn tdl_train(cfg: &MetaConfig, set: &TaskSet, pool: &[usize], seed: u64) -> Result<Trained> {
    check_algorithm(cfg, Algorithm::Tdl)?;
    if pool.is_empty() {
        return Err(MetaError::Empty("task pool"));
    }
    let mut rng = seed::rng_at(seed, &[stream::SPLIT]);
    let tasks = pool
        .iter()
        .map(|&id| task_by_id(set, id))
        .collect::<Result<Vec<_>>>()?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (k, t) in tasks.iter().enumerate() {
        let drawn = draw_pairs(t, &partitions(t, cfg.n)?.support_query(), cfg.n, &mut rng)?;
        let (tr, va) = stratified_split(t, &drawn, cfg.train_fraction, &mut rng);
        train.extend(tr.into_iter().map(|i| (k, i)));
        val.extend(va.into_iter().map(|i| (k, i)));
    }
    supervised_train(cfg, &tasks, train, val, seed)
}

/// Training from scratch on one task's support, query and k-shot
/// partitions, split per class into training and validation samples.
pub fn dnc_train(cfg: &MetaConfig, task: &Task, seed: u64) -> Result<Trained> {
    check_algorithm(cfg, Algorithm::Dnc)?;
    let p = partitions(task, cfg.n)?;
    let all: Vec<usize> = p
        .support_query()
        .into_iter()
        .chain(p.kshot.iter().copied())
        .collect();
    let mut rng = seed::rng_at(seed, &[stream::SPLIT]);
    let (tr, va) = stratified_split(task, &all, cfg.train_fraction, &mut rng);
    supervised_train(
        cfg,
        &[task],
        tr.into_iter().map(|i| (0, i)).collect(),
        va.into_iter().map(|i| (0, i)).collect(),
        seed,
    )
}

/// What one training run learns from.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Meta(MetaSplit<'a>),
    Pool(&'a [usize]),
    Task(usize),
}

/// Trains ensemble member `member` with its derived seed.
pub fn train_member(
    cfg: &MetaConfig,
    set: &TaskSet,
    target: Target<'_>,
    member: usize,
) -> Result<Trained> {
    let seed = seed::derive_path(cfg.seed, &[stream::ENSEMBLE, member as u64]);
    match (cfg.algorithm, target) {
        (Algorithm::Reptile, Target::Meta(s)) => reptile_train(cfg, set, &s, seed),
        (Algorithm::Fomaml, Target::Meta(s)) => fomaml_train(cfg, set, &s, seed),
        (Algorithm::Tdl, Target::Pool(p)) => tdl_train(cfg, set, p, seed),
        (Algorithm::Dnc, Target::Task(id)) => dnc_train(cfg, task_by_id(set, id)?, seed),
        (a, t) => Err(MetaError::Config(format!("{a} cannot train on {t:?}"))),
    }
}

/// `cfg.ensembles` independent members, trained in parallel and returned in
/// member order.
pub fn run_ensemble(cfg: &MetaConfig, set: &TaskSet, target: Target<'_>) -> Result<Vec<Trained>> {
    cfg.validate()?;
    (0..cfg.ensembles)
        .into_par_iter()
        .map(|e| train_member(cfg, set, target, e))
        .collect()
}
