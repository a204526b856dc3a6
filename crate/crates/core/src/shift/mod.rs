//! Model-relevant shift between tasks.
//!
//! Task-specific models give a cross-task accuracy matrix (and from it the
//! proportion `p_u` of foreign models each native model beats) and, through
//! linear CKA on pooled activations, a similarity matrix. Ward clustering of
//! the derived distances yields the test/pool split and the depth-based
//! diversity weights used for task sampling.

mod cka;
mod cluster;

use std::fmt::Write as _;

pub use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{ArchitectureSpec, NnError, ParameterSet};
use crate::seed::Rng;

pub use cka::{
    center_columns, extract_activations, linear_cka, pairwise_similarity, similarity_to_distance,
};
pub use cluster::{
    assign_splits, diversity_weights, select_validation_diverse, select_validation_uniform,
    submatrix, uniform_weights, ward_cluster, Dendrogram, Merge,
};

#[derive(Debug, Error)]
pub enum ShiftError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("similarity undefined for an all-zero activation matrix")]
    ZeroMatrix,
    #[error("distance matrix is not symmetric at ({u}, {v})")]
    NotSymmetric { u: usize, v: usize },
    #[error("task {task} has {got} ensemble members; diagonal similarity needs at least 2")]
    TooFewEnsembles { task: usize, got: usize },
    #[error("need at least {needed} tasks, got {got}")]
    TooFewTasks { needed: usize, got: usize },
    #[error("fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("cannot draw {batch} tasks from {available}")]
    BatchTooLarge { batch: usize, available: usize },
    #[error("invalid sampling weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, ShiftError>;

/// Test/pool split of a task set, with the pool's two top-level branches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub test: Vec<usize>,
    pub pool: Vec<usize>,
    pub train_a: Vec<usize>,
    pub train_b: Vec<usize>,
}

/// `a[(u, v)]`: mean accuracy over the models of task `u` on task `v`'s data.
pub fn cross_accuracy(
    spec: &ArchitectureSpec,
    ensembles: &[Vec<ParameterSet>],
    data: &[(Vec<&[f32]>, Vec<u8>)],
) -> Result<DMatrix<f64>> {
    let t = ensembles.len();
    if data.len() != t {
        return Err(ShiftError::Dimension(format!(
            "{t} ensembles but {} data sets",
            data.len()
        )));
    }
    let mut a = DMatrix::zeros(t, t);
    for (u, members) in ensembles.iter().enumerate() {
        if members.is_empty() {
            return Err(ShiftError::TooFewEnsembles { task: u, got: 0 });
        }
        for (v, (inputs, labels)) in data.iter().enumerate() {
            let mut total = 0.0;
            for p in members {
                total += crate::eval::accuracy(spec, p, inputs, labels)?;
            }
            a[(u, v)] = total / members.len() as f64;
        }
    }
    Ok(a)
}

/// Fraction of foreign models that the native model of task `u` strictly
/// beats on task `u`: `p_u = #{v != u : a_uu > a_vu} / (T - 1)`.
pub fn compute_pu(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    let t = a.nrows();
    if a.ncols() != t {
        return Err(ShiftError::Dimension(format!(
            "accuracy matrix is {}x{}",
            t,
            a.ncols()
        )));
    }
    if t < 2 {
        return Err(ShiftError::TooFewTasks { needed: 2, got: t });
    }
    Ok((0..t)
        .map(|u| {
            (0..t).filter(|&v| v != u && a[(u, u)] > a[(v, u)]).count() as f64 / (t - 1) as f64
        })
        .collect())
}

/// `(A + A') / 2`.
pub fn symmetrize_accuracy(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Weighted draw without replacement: each pick is proportional to the
/// weights of the tasks not yet drawn.
pub fn sample_task_batch(
    train: &[usize],
    weights: &[f64],
    batch: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if weights.len() != train.len() {
        return Err(ShiftError::Dimension(format!(
            "{} weights for {} tasks",
            weights.len(),
            train.len()
        )));
    }
    if batch > train.len() {
        return Err(ShiftError::BatchTooLarge {
            batch,
            available: train.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(ShiftError::Weights(
            "weights must be positive and finite".into(),
        ));
    }
    let mut left: Vec<(usize, f64)> = train.iter().copied().zip(weights.iter().copied()).collect();
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let total: f64 = left.iter().map(|x| x.1).sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = left.len() - 1;
        for (k, &(_, w)) in left.iter().enumerate() {
            acc += w;
            if target < acc {
                pick = k;
                break;
            }
        }
        out.push(left.remove(pick).0);
    }
    Ok(out)
}

/// `sum_t gamma_t * mean_{v in test} s[(t, v)]` over the training tasks.
pub fn mean_weighted_similarity(
    train: &[usize],
    gamma: &[f64],
    test: &[usize],
    s: &DMatrix<f64>,
) -> f64 {
    train
        .iter()
        .zip(gamma)
        .map(|(&t, &g)| g * test.iter().map(|&v| s[(t, v)]).sum::<f64>() / test.len() as f64)
        .sum()
}

/// One bin of the similarity-versus-accuracy relation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBin {
    pub mean_similarity: f64,
    pub mean_accuracy: f64,
    /// Bin mean accuracy standardised across bins to zero mean and unit
    /// variance.
    pub standardized_accuracy: f64,
    pub count: usize,
}

/// Sorts the off-diagonal pairs `u < v` by similarity and cuts them into
/// `bins` groups of (nearly) equal size.
pub fn similarity_accuracy_bins(
    s: &DMatrix<f64>,
    a_sym: &DMatrix<f64>,
    bins: usize,
) -> Vec<SimilarityBin> {
    let t = s.nrows();
    let mut pairs: Vec<(f64, f64)> = (0..t)
        .flat_map(|u| ((u + 1)..t).map(move |v| (u, v)))
        .map(|(u, v)| (s[(u, v)], a_sym[(u, v)]))
        .collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let bins = bins.min(pairs.len());
    if bins == 0 {
        return Vec::new();
    }
    let mut out: Vec<SimilarityBin> = (0..bins)
        .map(|b| {
            let chunk = &pairs[b * pairs.len() / bins..(b + 1) * pairs.len() / bins];
            let n = chunk.len() as f64;
            SimilarityBin {
                mean_similarity: chunk.iter().map(|p| p.0).sum::<f64>() / n,
                mean_accuracy: chunk.iter().map(|p| p.1).sum::<f64>() / n,
                standardized_accuracy: 0.0,
                count: chunk.len(),
            }
        })
        .collect();
    let accs: Vec<f64> = out.iter().map(|b| b.mean_accuracy).collect();
    let m = crate::stats::mean(&accs);
    let sd = crate::stats::sample_variance(&accs).sqrt();
    for b in &mut out {
        b.standardized_accuracy = if sd > 0.0 {
            (b.mean_accuracy - m) / sd
        } else {
            0.0
        };
    }
    out
}

/// CSV with a `task` header row and column of task ids.
pub fn matrix_csv(ids: &[usize], m: &DMatrix<f64>) -> String {
    let mut s = String::from("task");
    for id in ids {
        let _ = write!(s, ",{id}");
    }
    s.push('\n');
    for (r, id) in ids.iter().enumerate() {
        let _ = write!(s, "{id}");
        for c in 0..ids.len() {
            let _ = write!(s, ",{:.9}", m[(r, c)]);
        }
        s.push('\n');
    }
    s
}
