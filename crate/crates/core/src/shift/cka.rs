use nalgebra::DMatrix;
use rayon::prelude::*;

use super::{Result, ShiftError};
use crate::nn::{pooled_features, ArchitectureSpec, ParameterSet};

fn feature_matrix(
    spec: &ArchitectureSpec,
    params: &ParameterSet,
    inputs: &[&[f32]],
) -> Result<DMatrix<f64>> {
    let rows = pooled_features(spec, params, inputs)?;
    let cols = spec.feature_dim();
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j] as f64))
}

/// Subtracts each column's mean.
pub fn center_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
}

/// Post-GAP activations, one row per input, column-centred.
pub fn extract_activations(
    spec: &ArchitectureSpec,
    params: &ParameterSet,
    inputs: &[&[f32]],
) -> Result<DMatrix<f64>> {
    let mut m = feature_matrix(spec, params, inputs)?;
    center_columns(&mut m);
    Ok(m)
}

/// Linear CKA of two column-centred activation matrices, on a 0-100 scale:
/// `100 ||Y'X||^2 / (||X'X|| ||Y'Y||)` with Frobenius norms.
pub fn linear_cka(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(ShiftError::Dimension(format!(
            "activation row counts differ: {} vs {}",
            x.nrows(),
            y.nrows()
        )));
    }
    let cross = y.tr_mul(x).norm_squared();
    let den = x.tr_mul(x).norm() * y.tr_mul(y).norm();
    if den == 0.0 {
        return Err(ShiftError::ZeroMatrix);
    }
    Ok(100.0 * cross / den)
}

fn stack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    m.rows_mut(0, a.nrows()).copy_from(a);
    m.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    m
}

/// Task-by-task similarity. `ensembles[u]` are the models trained on task
/// `u` and `data[u]` its inputs. Off-diagonal cells compare every model of
/// task `u` with every model of task `v` on the concatenated data of both
/// tasks; diagonal cells compare distinct model pairs of one task on its own
/// data. Every cell is an average of CKA values.
pub fn pairwise_similarity(
    spec: &ArchitectureSpec,
    ensembles: &[Vec<ParameterSet>],
    data: &[Vec<&[f32]>],
) -> Result<DMatrix<f64>> {
    let t = ensembles.len();
    if data.len() != t {
        return Err(ShiftError::Dimension(format!(
            "{t} ensembles but {} data sets",
            data.len()
        )));
    }
    if let Some((task, e)) = ensembles.iter().enumerate().find(|(_, e)| e.len() < 2) {
        return Err(ShiftError::TooFewEnsembles { task, got: e.len() });
    }
    // feats[u][i][w]: model i of task u on task w's data, uncentred.
    let feats: Vec<Vec<Vec<DMatrix<f64>>>> = ensembles
        .iter()
        .map(|members| {
            members
                .iter()
                .map(|p| {
                    data.par_iter()
                        .map(|d| feature_matrix(spec, p, d))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let cells: Vec<(usize, usize)> = (0..t).flat_map(|u| (u..t).map(move |v| (u, v))).collect();
    let values = cells
        .par_iter()
        .map(|&(u, v)| {
            let (eu, ev) = (feats[u].len(), feats[v].len());
            let mut total = 0.0;
            let mut count = 0usize;
            for i in 0..eu {
                let start = if u == v { i + 1 } else { 0 };
                for j in start..ev {
                    let (mut x, mut y) = if u == v {
                        (feats[u][i][u].clone(), feats[v][j][u].clone())
                    } else {
                        (
                            stack(&feats[u][i][u], &feats[u][i][v]),
                            stack(&feats[v][j][u], &feats[v][j][v]),
                        )
                    };
                    center_columns(&mut x);
                    center_columns(&mut y);
                    total += linear_cka(&x, &y)?;
                    count += 1;
                }
            }
            Ok(total / count as f64)
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut s = DMatrix::zeros(t, t);
    for (&(u, v), val) in cells.iter().zip(values) {
        s[(u, v)] = val;
        s[(v, u)] = val;
    }
    Ok(s)
}

/// `100 - s` off the diagonal, zero on it.
pub fn similarity_to_distance(s: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(s.nrows(), s.ncols(), |u, v| {
        if u == v {
            0.0
        } else {
            100.0 - s[(u, v)]
        }
    })
}
