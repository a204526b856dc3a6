use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{sample_task_batch, Result, ShiftError, SplitAssignment};
use crate::seed::Rng;

/// One agglomeration step. Node ids below `n_leaves` are leaves; the merge
/// at position `k` creates node `n_leaves + k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub n_leaves: usize,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn root(&self) -> usize {
        if self.merges.is_empty() {
            0
        } else {
            self.n_leaves + self.merges.len() - 1
        }
    }

    pub fn children(&self, node: usize) -> Option<(usize, usize)> {
        node.checked_sub(self.n_leaves)
            .and_then(|k| self.merges.get(k))
            .map(|m| (m.left, m.right))
    }

    /// Leaves under `node`, left to right.
    pub fn leaves(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            match self.children(n) {
                Some((l, r)) => {
                    stack.push(r);
                    stack.push(l);
                }
                None => out.push(n),
            }
        }
        out
    }

    /// Number of bifurcations between the root and each leaf.
    pub fn depths(&self) -> Vec<usize> {
        let mut depth = vec![0usize; self.n_leaves];
        let mut stack = vec![(self.root(), 0usize)];
        while let Some((n, d)) = stack.pop() {
            match self.children(n) {
                Some((l, r)) => {
                    stack.push((l, d + 1));
                    stack.push((r, d + 1));
                }
                None => depth[n] = d,
            }
        }
        depth
    }

    /// Exchanges the root's two subtrees.
    pub fn swap_root_children(&mut self) {
        if let Some(m) = self.merges.last_mut() {
            std::mem::swap(&mut m.left, &mut m.right);
        }
    }

    /// Text listing of the merges, one `left right height size` line each.
    pub fn to_text(&self) -> String {
        let mut s = format!("leaves {}\n", self.n_leaves);
        for m in &self.merges {
            let _ = writeln!(s, "{} {} {:.12e} {}", m.left, m.right, m.height, m.size);
        }
        s
    }
}

fn validate_distance(d: &DMatrix<f64>) -> Result<()> {
    let n = d.nrows();
    if n == 0 || d.ncols() != n {
        return Err(ShiftError::Dimension(format!(
            "distance matrix is {}x{}",
            n,
            d.ncols()
        )));
    }
    for u in 0..n {
        if d[(u, u)] != 0.0 {
            return Err(ShiftError::Dimension(format!("nonzero diagonal at {u}")));
        }
        for v in 0..u {
            let (a, b) = (d[(u, v)], d[(v, u)]);
            if !a.is_finite() || a < 0.0 {
                return Err(ShiftError::Dimension(format!(
                    "invalid distance {a} at ({u}, {v})"
                )));
            }
            if (a - b).abs() > 1e-9 * a.abs().max(b.abs()).max(1.0) {
                return Err(ShiftError::NotSymmetric { u, v });
            }
        }
    }
    Ok(())
}

/// Agglomerative clustering with Ward linkage, updating squared
/// dissimilarities by the Lance-Williams recurrence. Reported heights are
/// square roots of the merged pair's squared dissimilarity. Ties go to the
/// pair with the lowest `(smaller id, larger id)`.
pub fn ward_cluster(d: &DMatrix<f64>) -> Result<Dendrogram> {
    validate_distance(d)?;
    let n = d.nrows();
    let total = 2 * n - 1;
    let mut d2 = vec![0.0f64; total * total];
    for u in 0..n {
        for v in 0..n {
            d2[u * total + v] = d[(u, v)].powi(2);
        }
    }
    let mut size = vec![1usize; total];
    let mut active: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n - 1);
    while active.len() > 1 {
        let mut best = (f64::INFINITY, usize::MAX, usize::MAX);
        // `active` is kept sorted, so the first strict minimum in scan order
        // is the lowest pair among ties.
        for (a, &i) in active.iter().enumerate() {
            for &j in &active[a + 1..] {
                let v = d2[i * total + j];
                if v < best.0 {
                    best = (v, i, j);
                }
            }
        }
        let (dij, i, j) = best;
        let new = n + merges.len();
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for &k in &active {
            if k == i || k == j {
                continue;
            }
            let nk = size[k] as f64;
            let v = ((ni + nk) * d2[i * total + k] + (nj + nk) * d2[j * total + k] - nk * dij)
                / (ni + nj + nk);
            d2[new * total + k] = v;
            d2[k * total + new] = v;
        }
        size[new] = size[i] + size[j];
        merges.push(Merge {
            left: i,
            right: j,
            height: dij.max(0.0).sqrt(),
            size: size[new],
        });
        active.retain(|&k| k != i && k != j);
        active.push(new);
    }
    Ok(Dendrogram {
        n_leaves: n,
        merges,
    })
}

/// Root-branch split: the root's left subtree is the test split and the
/// right subtree the training pool, whose own two subtrees become groups A
/// and B. `ids[leaf]` maps leaves to task ids.
pub fn assign_splits(dend: &Dendrogram, ids: &[usize]) -> Result<SplitAssignment> {
    if dend.n_leaves < 2 {
        return Err(ShiftError::TooFewTasks {
            needed: 2,
            got: dend.n_leaves,
        });
    }
    if ids.len() != dend.n_leaves {
        return Err(ShiftError::Dimension(format!(
            "{} ids for {} leaves",
            ids.len(),
            dend.n_leaves
        )));
    }
    let map = |v: Vec<usize>| -> Vec<usize> {
        let mut out: Vec<usize> = v.into_iter().map(|l| ids[l]).collect();
        out.sort_unstable();
        out
    };
    let (l, r) = dend
        .children(dend.root())
        .expect("root of a tree with two or more leaves");
    let (train_a, train_b) = match dend.children(r) {
        Some((a, b)) => (map(dend.leaves(a)), map(dend.leaves(b))),
        None => (map(vec![r]), Vec::new()),
    };
    Ok(SplitAssignment {
        test: map(dend.leaves(l)),
        pool: map(dend.leaves(r)),
        train_a,
        train_b,
    })
}

/// `2^-depth` per leaf, normalised to sum to one.
pub fn diversity_weights(dend: &Dendrogram) -> Vec<f64> {
    let raw: Vec<f64> = dend
        .depths()
        .iter()
        .map(|&k| 0.5f64.powi(k as i32))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

pub fn submatrix(d: &DMatrix<f64>, ids: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(ids.len(), ids.len(), |a, b| d[(ids[a], ids[b])])
}

fn validation_count(pool: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(ShiftError::InvalidFraction(fraction));
    }
    let k = (fraction * pool as f64 - 1e-9).ceil() as usize;
    if pool < 2 || k >= pool {
        return Err(ShiftError::TooFewTasks {
            needed: k + 1,
            got: pool,
        });
    }
    Ok(k.max(1))
}

/// Picks validation tasks one at a time with probabilities from the
/// diversity weights of the remaining pool, re-clustering after each pick.
/// `d` is indexed by task id. Returns `(train, validation)`.
pub fn select_validation_diverse(
    pool: &[usize],
    fraction: f64,
    d: &DMatrix<f64>,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let k = validation_count(pool.len(), fraction)?;
    let mut remaining = pool.to_vec();
    remaining.sort_unstable();
    let mut val = Vec::with_capacity(k);
    for _ in 0..k {
        let dend = ward_cluster(&submatrix(d, &remaining))?;
        let gamma = diversity_weights(&dend);
        let pick = sample_task_batch(&remaining, &gamma, 1, rng)?[0];
        remaining.retain(|&t| t != pick);
        val.push(pick);
    }
    Ok((remaining, val))
}

/// Uniform counterpart of [`select_validation_diverse`].
pub fn select_validation_uniform(
    pool: &[usize],
    fraction: f64,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let k = validation_count(pool.len(), fraction)?;
    let mut remaining = pool.to_vec();
    remaining.sort_unstable();
    let mut val = Vec::with_capacity(k);
    for _ in 0..k {
        let pick = remaining.remove(rng.random_range(0..remaining.len()));
        val.push(pick);
    }
    Ok((remaining, val))
}
