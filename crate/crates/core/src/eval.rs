//! K-shot fine-tuning evaluation and the normal-model summaries of its
//! accuracies.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meta::{inner_adapt, Algorithm, Episode, MetaError, Sampling};
use crate::nn::{
    predict_logits, sgd_step, value_and_grad, ArchName, ArchitectureSpec, NnError, ParameterSet,
};
use crate::seed::{self, stream};
use crate::stats;
use crate::taskgen::Task;

/// Fine-tuning epochs after the initial evaluation.
pub const FT_EPOCHS: usize = 20;
pub const DEFAULT_K_VALUES: [usize; 4] = [1, 5, 10, 50];
/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.96;
pub const MIN_QQ_RESIDUALS: usize = 30;
/// Fine-tuning steps per epoch for TDL.
pub const TDL_FT_STEPS: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("task {task}: K={k} exceeds the {available} k-shot samples per class")]
    KTooLarge {
        task: usize,
        k: usize,
        available: usize,
    },
    #[error("task {task} has no partitions for N={n}")]
    MissingPartition { task: usize, n: usize },
    #[error("task {task} has {got} ensemble members; at least 2 are needed")]
    TooFewEnsembles { task: usize, got: usize },
    #[error("{got} residuals with non-zero task variance; at least {needed} are needed")]
    TooFewResiduals { got: usize, needed: usize },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Meta(#[from] MetaError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Fraction of inputs whose logit is non-negative (probability >= 0.5)
/// exactly when the label is 1.
pub fn accuracy(
    spec: &ArchitectureSpec,
    params: &ParameterSet,
    inputs: &[&[f32]],
    labels: &[u8],
) -> std::result::Result<f64, NnError> {
    if inputs.len() != labels.len() {
        return Err(NnError::Dimension {
            layer: "labels".into(),
            expected: inputs.len(),
            got: labels.len(),
        });
    }
    if inputs.is_empty() {
        return Ok(0.0);
    }
    let logits = predict_logits(spec, params, inputs)?;
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|&(&z, &y)| (z >= 0.0) == (y == 1))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `K` samples per class from the task's k-shot partition, alternating
/// signal and noise. Depends only on `(seed, task, K)`, so every algorithm
/// fine-tunes on the same waveforms.
pub fn select_kshot(task: &Task, n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    let p = task
        .partition(n)
        .ok_or(EvalError::MissingPartition { task: task.id, n })?;
    let mut rng = seed::rng_at(seed, &[stream::KSHOT, task.id as u64, k as u64]);
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) =
        p.kshot.iter().partition(|&&i| task.labels[i] == 1);
    let available = pos.len().min(neg.len());
    if k == 0 || k > available {
        return Err(EvalError::KTooLarge {
            task: task.id,
            k,
            available,
        });
    }
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    Ok(crate::taskgen::interleave(&pos[..k], &neg[..k]))
}

/// Indices a model is scored on. Out-of-distribution tasks use their
/// hold-out partition; factorial tasks pool everything outside the k-shot
/// partition, except for D&C, whose models were trained on the support and
/// query partitions and so are scored on the hold-out partition only.
pub fn evaluation_pool(task: &Task, n: usize, algorithm: Algorithm) -> Result<Vec<usize>> {
    let p = task
        .partition(n)
        .ok_or(EvalError::MissingPartition { task: task.id, n })?;
    Ok(if task.is_ood() || algorithm == Algorithm::Dnc {
        p.holdout.clone()
    } else {
        p.non_kshot()
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneSettings {
    pub algorithm: Algorithm,
    /// Training amount whose partitions are used.
    pub n: usize,
    pub k: usize,
    /// SGD rate of every fine-tuning step.
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneResult {
    pub task: usize,
    pub ensemble: usize,
    pub k: usize,
    /// Index 0 is the unadapted model.
    pub accuracy: Vec<f64>,
}

/// Scores `phi` on the task, then applies `FT_EPOCHS` adaptation units to
/// a copy, scoring after each one.
///
/// One unit is `min(5, K)` SGD steps over the K-shot data for Reptile, one
/// full-batch step for FOMAML, and five mini-batch steps of `ceil(2K / 5)`
/// samples for TDL. D&C models are not fine-tuned.
pub fn finetune_and_eval(
    spec: &ArchitectureSpec,
    phi: &ParameterSet,
    task: &Task,
    ensemble: usize,
    s: &FinetuneSettings,
) -> Result<FinetuneResult> {
    let shots = select_kshot(task, s.n, s.k, s.seed)?;
    let pool = evaluation_pool(task, s.n, s.algorithm)?;
    if pool.is_empty() {
        return Err(EvalError::Empty("evaluation pool"));
    }
    let (eval_x, eval_y) = task.batch(&pool);
    let train = Episode::from_task(task, &shots);
    let score = |p: &ParameterSet| accuracy(spec, p, &eval_x, &eval_y);

    let mut theta = phi.clone();
    let first = score(&theta)?;
    let mut curve = Vec::with_capacity(FT_EPOCHS + 1);
    curve.push(first);
    let tdl_batch = (2 * s.k).div_ceil(TDL_FT_STEPS);
    let mut cursor = 0;
    for _ in 0..FT_EPOCHS {
        match s.algorithm {
            Algorithm::Dnc => {
                curve.push(first);
                continue;
            }
            Algorithm::Reptile => theta = inner_adapt(spec, &theta, &train, s.k.min(5), s.lr)?,
            Algorithm::Fomaml => theta = inner_adapt(spec, &theta, &train, 1, s.lr)?,
            Algorithm::Tdl => {
                for _ in 0..TDL_FT_STEPS {
                    let idx: Vec<usize> =
                        (0..tdl_batch).map(|j| (cursor + j) % train.len()).collect();
                    cursor = (cursor + tdl_batch) % train.len();
                    let x: Vec<&[f32]> = idx.iter().map(|&i| train.inputs[i]).collect();
                    let y: Vec<u8> = idx.iter().map(|&i| train.labels[i]).collect();
                    let (_, g) = value_and_grad(spec, &theta, &x, &y)?;
                    sgd_step(&mut theta, &g, s.lr)?;
                }
            }
        }
        curve.push(score(&theta)?);
    }
    Ok(FinetuneResult {
        task: task.id,
        ensemble,
        k: s.k,
        accuracy: curve,
    })
}

/// Highest accuracy and the earliest epoch reaching it.
pub fn best_accuracy(r: &FinetuneResult) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for (e, &a) in r.accuracy.iter().enumerate() {
        if a > best.0 {
            best = (a, e);
        }
    }
    best
}

/// Mean epoch of best accuracy.
pub fn finetune_speed(results: &[FinetuneResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(EvalError::Empty("result list"));
    }
    Ok(results
        .iter()
        .map(|r| best_accuracy(r).1 as f64)
        .sum::<f64>()
        / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    /// Ensemble mean per task.
    pub acc_t: Vec<f64>,
    /// Unbiased ensemble variance per task.
    pub var_t: Vec<f64>,
    pub alpha: f64,
    /// `T^-2 * sum_t var_t / E`.
    pub sigma2: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Normal-model summary of accuracies indexed `[task][ensemble]`.
pub fn aggregate(acc: &[Vec<f64>]) -> Result<AggregateRecord> {
    if acc.is_empty() {
        return Err(EvalError::Empty("accuracy table"));
    }
    let e = acc[0].len();
    for (task, row) in acc.iter().enumerate() {
        if row.len() < 2 || row.len() != e {
            return Err(EvalError::TooFewEnsembles {
                task,
                got: row.len(),
            });
        }
    }
    let t = acc.len() as f64;
    let acc_t: Vec<f64> = acc.iter().map(|r| stats::mean(r)).collect();
    let var_t: Vec<f64> = acc.iter().map(|r| stats::sample_variance(r)).collect();
    let alpha = stats::mean(&acc_t);
    let sigma2 = var_t.iter().sum::<f64>() / e as f64 / (t * t);
    let half = Z95 * sigma2.sqrt();
    Ok(AggregateRecord {
        acc_t,
        var_t,
        alpha,
        sigma2,
        ci_low: alpha - half,
        ci_high: alpha + half,
    })
}

/// Sorted sample values paired with standard normal quantiles at
/// `(i - 0.5) / n`. Returns `(theoretical, sample)`.
pub fn qq_pairs(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter()
        .enumerate()
        .map(|(i, x)| (stats::normal_quantile((i as f64 + 0.5) / n), x))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QqResult {
    pub pairs: Vec<(f64, f64)>,
    /// Tasks left out because their ensemble variance is zero.
    pub skipped_tasks: usize,
}

/// Residuals `Acc_te - Acc_t` standardised by the task's ensemble standard
/// deviation, against normal quantiles.
pub fn qq_residuals(acc: &[Vec<f64>]) -> Result<QqResult> {
    let mut residuals = Vec::new();
    let mut skipped_tasks = 0;
    for row in acc {
        let sd = stats::sample_variance(row).sqrt();
        if !(sd > 0.0) {
            skipped_tasks += 1;
            continue;
        }
        let m = stats::mean(row);
        residuals.extend(row.iter().map(|a| (a - m) / sd));
    }
    if residuals.len() < MIN_QQ_RESIDUALS {
        return Err(EvalError::TooFewResiduals {
            got: residuals.len(),
            needed: MIN_QQ_RESIDUALS,
        });
    }
    Ok(QqResult {
        pairs: qq_pairs(&residuals),
        skipped_tasks,
    })
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub algorithm: Algorithm,
    pub architecture: ArchName,
    pub sampling: Sampling,
    pub n: usize,
    pub k: usize,
    pub task_id: usize,
    pub ensemble: usize,
    pub ft_epoch: usize,
    pub accuracy: f64,
}

impl AccuracyRecord {
    pub const CSV_HEADER: &'static str =
        "algorithm,architecture,sampling,N,K,task_id,ensemble,ft_epoch,accuracy";

    /// Rows for every epoch of a fine-tuning curve.
    pub fn from_result(
        algorithm: Algorithm,
        architecture: ArchName,
        sampling: Sampling,
        n: usize,
        r: &FinetuneResult,
    ) -> Vec<Self> {
        r.accuracy
            .iter()
            .enumerate()
            .map(|(ft_epoch, &accuracy)| Self {
                algorithm,
                architecture,
                sampling,
                n,
                k: r.k,
                task_id: r.task,
                ensemble: r.ensemble,
                ft_epoch,
                accuracy,
            })
            .collect()
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.9}",
            self.algorithm,
            self.architecture,
            self.sampling,
            self.n,
            self.k,
            self.task_id,
            self.ensemble,
            self.ft_epoch,
            self.accuracy
        )
    }
}

/// Header plus one line per record, in the given order.
pub fn results_csv(records: &[AccuracyRecord]) -> String {
    let mut s = String::from(AccuracyRecord::CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}
