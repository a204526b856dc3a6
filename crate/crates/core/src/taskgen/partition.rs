use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Result, Task, TaskgenError};
use crate::seed::{self, stream};

/// Disjoint, exhaustive index lists over a task's waveforms. Every list
/// alternates signal and noise indices while both classes last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partitions {
    pub n: usize,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    pub kshot: Vec<usize>,
    pub holdout: Vec<usize>,
}

impl Partitions {
    /// Support and query together, in that order.
    pub fn support_query(&self) -> Vec<usize> {
        self.support.iter().chain(&self.query).copied().collect()
    }

    /// Everything except the k-shot partition.
    pub fn non_kshot(&self) -> Vec<usize> {
        self.support
            .iter()
            .chain(&self.query)
            .chain(&self.holdout)
            .copied()
            .collect()
    }
}

pub(crate) fn interleave(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..a.len().max(b.len()) {
        out.extend(a.get(i));
        out.extend(b.get(i));
    }
    out
}

/// Splits a task into class-balanced random partitions of `n` pairs per
/// class: support, query and k-shot for factorial tasks, k-shot only for
/// out-of-distribution tasks, and the remainder as hold-out. Deterministic
/// in `(seed, task.id, n)`.
pub fn partition_task(task: &Task, n: usize, seed: u64) -> Result<Partitions> {
    if n == 0 {
        return Err(TaskgenError::Invalid("N must be at least 1".into()));
    }
    let groups = if task.is_ood() { 1 } else { 3 };
    let required = groups * n + 1;
    let [neg, pos] = task.class_counts();
    let available = neg.min(pos);
    if available < required {
        return Err(TaskgenError::Sizing {
            task: task.id,
            n,
            required,
            available,
        });
    }
    let mut rng = seed::rng_at(seed, &[stream::PARTITION, task.id as u64, n as u64]);
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &y) in task.labels.iter().enumerate() {
        by_class[y as usize].push(i);
    }
    for c in &mut by_class {
        c.shuffle(&mut rng);
    }
    let [noise, signal] = &by_class;
    let take = |g: usize| interleave(&signal[g * n..(g + 1) * n], &noise[g * n..(g + 1) * n]);
    let holdout = interleave(&signal[groups * n..], &noise[groups * n..]);
    Ok(if groups == 3 {
        Partitions {
            n,
            support: take(0),
            query: take(1),
            kshot: take(2),
            holdout,
        }
    } else {
        Partitions {
            n,
            support: Vec::new(),
            query: Vec::new(),
            kshot: take(0),
            holdout,
        }
    })
}
