use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{MetaError, Result};
use crate::nn::{sgd_step, value_and_grad, ArchitectureSpec, ParameterSet, Scalar};
use crate::seed::Rng;
use crate::taskgen::Task;

/// Borrowed inputs and labels of one adaptation or scoring set.
#[derive(Debug, Clone)]
pub struct Episode<'a, T = f32> {
    pub inputs: Vec<&'a [T]>,
    pub labels: Vec<u8>,
}

impl<'a> Episode<'a, f32> {
    pub fn from_task(task: &'a Task, indices: &[usize]) -> Self {
        let (inputs, labels) = task.batch(indices);
        Self { inputs, labels }
    }
}

impl<T> Episode<'_, T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn by_class(task: &Task, indices: &[usize]) -> [Vec<usize>; 2] {
    let mut out = [Vec::new(), Vec::new()];
    for &i in indices {
        out[task.labels[i] as usize].push(i);
    }
    out
}

/// `n` random samples of each class from `indices`, alternating signal and
/// noise.
pub fn draw_pairs(task: &Task, indices: &[usize], n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let [mut neg, mut pos] = by_class(task, indices);
    let available = neg.len().min(pos.len());
    if available < n {
        return Err(MetaError::Insufficient {
            task: task.id,
            required: n,
            available,
        });
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    Ok(crate::taskgen::interleave(&pos[..n], &neg[..n]))
}

/// Per-class random split keeping `round(fraction * count)` of each class
/// for training. Returns `(train, validation)`.
pub fn stratified_split(
    task: &Task,
    indices: &[usize],
    fraction: f64,
    rng: &mut Rng,
) -> (Vec<usize>, Vec<usize>) {
    let [mut neg, mut pos] = by_class(task, indices);
    pos.shuffle(rng);
    neg.shuffle(rng);
    let kp = (fraction * pos.len() as f64).round() as usize;
    let kn = (fraction * neg.len() as f64).round() as usize;
    (
        crate::taskgen::interleave(&pos[..kp], &neg[..kn]),
        crate::taskgen::interleave(&pos[kp..], &neg[kn..]),
    )
}

/// `steps` SGD steps from `phi` over consecutive chunks of `data`; the first
/// `len % steps` chunks take one extra sample.
pub fn inner_adapt<T: Scalar>(
    spec: &ArchitectureSpec,
    phi: &ParameterSet<T>,
    data: &Episode<'_, T>,
    steps: usize,
    lr: f64,
) -> Result<ParameterSet<T>> {
    let len = data.len();
    if steps == 0 || len < steps {
        return Err(MetaError::BatchSizing { len, steps });
    }
    let mut theta = phi.clone();
    let (base, extra) = (len / steps, len % steps);
    let mut start = 0;
    for k in 0..steps {
        let end = start + base + usize::from(k < extra);
        let (_, g) = value_and_grad(
            spec,
            &theta,
            &data.inputs[start..end],
            &data.labels[start..end],
        )?;
        sgd_step(&mut theta, &g, lr)?;
        start = end;
    }
    Ok(theta)
}

fn mean_in_order<T: Scalar>(parts: Vec<ParameterSet<T>>) -> ParameterSet<T> {
    let n = T::from_usize(parts.len()).unwrap();
    let mut iter = parts.into_iter();
    let mut acc = iter.next().expect("at least one part");
    for p in iter {
        acc.add_scaled(&p, T::one());
    }
    acc.scale(T::one() / n);
    acc
}

/// Reptile's meta-gradient `-(mean_t theta_t - phi)`, accumulated from the
/// per-task displacements so that a zero inner rate gives exactly zero.
pub fn reptile_meta_gradient<T: Scalar>(
    spec: &ArchitectureSpec,
    phi: &ParameterSet<T>,
    episodes: &[Episode<'_, T>],
    steps: usize,
    lr: f64,
) -> Result<ParameterSet<T>> {
    if episodes.is_empty() {
        return Err(MetaError::Empty("task batch"));
    }
    let deltas = episodes
        .par_iter()
        .map(|ep| Ok(phi.difference(&inner_adapt(spec, phi, ep, steps, lr)?)))
        .collect::<Result<Vec<_>>>()?;
    // `difference` is phi - theta, i.e. already the negated displacement.
    Ok(mean_in_order(deltas))
}

/// First-order MAML: one SGD step on each support set, then the gradient of
/// the query loss at the adapted parameters, averaged over tasks. Returns
/// the mean query loss and the averaged gradient.
pub fn fomaml_meta_gradient<T: Scalar>(
    spec: &ArchitectureSpec,
    phi: &ParameterSet<T>,
    episodes: &[(Episode<'_, T>, Episode<'_, T>)],
    lr: f64,
) -> Result<(f64, ParameterSet<T>)> {
    if episodes.is_empty() {
        return Err(MetaError::Empty("task batch"));
    }
    let parts = episodes
        .par_iter()
        .map(|(sup, que)| {
            let theta = inner_adapt(spec, phi, sup, 1, lr)?;
            let (loss, g) = value_and_grad(spec, &theta, &que.inputs, &que.labels)?;
            Ok((loss.to_f64().unwrap(), g))
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = parts.iter().map(|p| p.0).sum::<f64>() / parts.len() as f64;
    Ok((
        loss,
        mean_in_order(parts.into_iter().map(|p| p.1).collect()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ArchName};
    use crate::seed::rng;
    use rand_distr::{Distribution, StandardNormal};

    fn data(n: usize, samples: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<u8>) {
        let mut g = rng(seed);
        let x = (0..n)
            .map(|_| {
                (0..2 * samples)
                    .map(|_| StandardNormal.sample(&mut g))
                    .collect()
            })
            .collect();
        (x, (0..n).map(|i| (i % 2) as u8).collect())
    }

    #[test]
    fn zero_rate_is_identity() {
        let spec = ArchitectureSpec::build(ArchName::Mini);
        let phi = init_params(&spec, 1);
        let (x, y) = data(10, 40, 2);
        let x32: Vec<Vec<f32>> = x
            .iter()
            .map(|v| v.iter().map(|&a| a as f32).collect())
            .collect();
        let ep = Episode {
            inputs: x32.iter().map(|v| v.as_slice()).collect(),
            labels: y,
        };
        assert_eq!(inner_adapt(&spec, &phi, &ep, 5, 0.0).unwrap(), phi);
        let g = reptile_meta_gradient(&spec, &phi, &[ep.clone(), ep], 5, 0.0).unwrap();
        assert!(g.values().all(|v| *v == 0.0));
    }

    #[test]
    fn single_step_is_gradient_descent() {
        let spec = ArchitectureSpec::build(ArchName::Mini);
        let phi = init_params(&spec, 3).cast::<f64>();
        let (x, y) = data(6, 40, 4);
        let ep = Episode {
            inputs: x.iter().map(|v| v.as_slice()).collect(),
            labels: y,
        };
        let theta = inner_adapt(&spec, &phi, &ep, 1, 0.01).unwrap();
        let (_, g) = value_and_grad(&spec, &phi, &ep.inputs, &ep.labels).unwrap();
        let mut expect = phi.clone();
        expect.add_scaled(&g, -0.01);
        assert!(theta.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn chunking_and_sizing() {
        let spec = ArchitectureSpec::build(ArchName::Mini);
        let phi = init_params(&spec, 3).cast::<f64>();
        let (x, y) = data(4, 40, 4);
        let ep = Episode {
            inputs: x.iter().map(|v| v.as_slice()).collect(),
            labels: y,
        };
        assert!(matches!(
            inner_adapt(&spec, &phi, &ep, 5, 0.01),
            Err(MetaError::BatchSizing { len: 4, steps: 5 })
        ));
        // Four steps of one sample each equal a manual loop.
        let theta = inner_adapt(&spec, &phi, &ep, 4, 0.05).unwrap();
        let mut manual = phi.clone();
        for i in 0..4 {
            let (_, g) =
                value_and_grad(&spec, &manual, &ep.inputs[i..i + 1], &ep.labels[i..i + 1]).unwrap();
            manual.add_scaled(&g, -0.05);
        }
        assert!(theta.max_abs_diff(&manual) < 1e-15);
    }
}
