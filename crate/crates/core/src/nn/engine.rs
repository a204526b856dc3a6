use rayon::prelude::*;

use super::arch::INPUT_CHANNELS;
use super::{ArchitectureSpec, ConvSpec, LayerParams, NnError, ParameterSet, Result, Scalar};

/// Samples per gradient-reduction chunk. Fixed so the floating-point
/// summation order never depends on the number of worker threads.
const GRAD_CHUNK: usize = 4;

#[derive(Clone, Debug)]
struct ConvRecord<T> {
    len: usize,
    pre: Vec<T>,
    /// Post-ReLU (and post-pool, when pooled) output fed to the next layer.
    out: Vec<T>,
    argmax: Vec<u32>,
}

#[derive(Clone, Debug)]
struct SampleRecord<T> {
    input: Vec<T>,
    conv: Vec<ConvRecord<T>>,
    /// Inputs to each linear layer; entry 0 is the pooled feature vector.
    mlp_in: Vec<Vec<T>>,
    mlp_pre: Vec<Vec<T>>,
    logit: T,
}

/// Everything `loss_and_grads` needs to differentiate a recorded forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    samples: Vec<SampleRecord<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn logits(&self) -> Vec<T> {
        self.samples.iter().map(|s| s.logit).collect()
    }

    /// Global-average-pooled feature vector of sample `i`.
    pub fn features(&self, i: usize) -> &[T] {
        &self.samples[i].mlp_in[0]
    }

    /// Hash of every ReLU on/off state and pool argmax in the pass. Two passes
    /// with the same signature lie in the same linear region of the network.
    pub fn pattern_signature(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01B3;
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(PRIME);
        };
        for s in &self.samples {
            for c in &s.conv {
                for v in &c.pre {
                    mix((*v > T::zero()) as u64);
                }
                for &a in &c.argmax {
                    mix(a as u64 + 2);
                }
            }
            for pre in &s.mlp_pre {
                for v in pre {
                    mix((*v > T::zero()) as u64);
                }
            }
        }
        h
    }
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    let one = T::one();
    if z >= T::zero() {
        one / (one + (-z).exp())
    } else {
        let e = z.exp();
        e / (one + e)
    }
}

/// Binary cross-entropy of label `y` given logit `z`, in the overflow-free
/// form `max(z, 0) - z*y + ln(1 + e^{-|z|})`.
pub fn bce_with_logits<T: Scalar>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

fn infer_samples(inputs: &[&[impl Sized]]) -> Result<usize> {
    let first = inputs.first().map_or(0, |x| x.len());
    if first == 0 || first % INPUT_CHANNELS != 0 {
        return Err(NnError::Dimension {
            layer: "input".into(),
            expected: INPUT_CHANNELS,
            got: first,
        });
    }
    if let Some(bad) = inputs.iter().find(|x| x.len() != first) {
        return Err(NnError::Dimension {
            layer: "input".into(),
            expected: first,
            got: bad.len(),
        });
    }
    Ok(first / INPUT_CHANNELS)
}

fn check_params<T: Scalar>(spec: &ArchitectureSpec, params: &ParameterSet<T>) -> Result<()> {
    let shapes = spec.layer_shapes();
    if shapes.len() != params.layers.len() {
        return Err(NnError::Dimension {
            layer: "parameter set".into(),
            expected: shapes.len(),
            got: params.layers.len(),
        });
    }
    let n_conv = spec.conv_layers.len();
    for (i, (&(w, b, _), l)) in shapes.iter().zip(&params.layers).enumerate() {
        if l.weight.len() != w || l.bias.len() != b {
            let layer = if i < n_conv {
                format!("conv{i}")
            } else {
                format!("linear{}", i - n_conv)
            };
            return Err(NnError::Dimension {
                layer,
                expected: w + b,
                got: l.weight.len() + l.bias.len(),
            });
        }
    }
    Ok(())
}

/// Valid output range `[t0, t1)` for a tap at offset `shift`.
#[inline]
fn tap_range(len: usize, shift: isize) -> Option<(usize, usize)> {
    let t0 = (-shift).max(0) as usize;
    let t1 = (len as isize - shift).min(len as isize);
    if t1 <= t0 as isize {
        None
    } else {
        Some((t0, t1 as usize))
    }
}

fn conv_forward<T: Scalar>(x: &[T], len: usize, c: &ConvSpec, lp: &LayerParams<T>, out: &mut [T]) {
    let pad = (c.kernel / 2) as isize;
    for o in 0..c.out_channels {
        let row = &mut out[o * len..(o + 1) * len];
        row.fill(lp.bias[o]);
        for i in 0..c.in_channels {
            let xi = &x[i * len..(i + 1) * len];
            for j in 0..c.kernel {
                let w = lp.weight[(o * c.in_channels + i) * c.kernel + j];
                let shift = j as isize - pad;
                if let Some((t0, t1)) = tap_range(len, shift) {
                    let src = &xi[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
                    for (r, &s) in row[t0..t1].iter_mut().zip(src) {
                        *r = *r + w * s;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    x: &[T],
    len: usize,
    c: &ConvSpec,
    lp: &LayerParams<T>,
    dpre: &[T],
    grad: &mut LayerParams<T>,
    mut dx: Option<&mut [T]>,
) {
    let pad = (c.kernel / 2) as isize;
    for o in 0..c.out_channels {
        let drow = &dpre[o * len..(o + 1) * len];
        grad.bias[o] = grad.bias[o] + drow.iter().copied().sum::<T>();
        for i in 0..c.in_channels {
            let xi = &x[i * len..(i + 1) * len];
            for j in 0..c.kernel {
                let widx = (o * c.in_channels + i) * c.kernel + j;
                let shift = j as isize - pad;
                let Some((t0, t1)) = tap_range(len, shift) else {
                    continue;
                };
                let s0 = (t0 as isize + shift) as usize;
                let s1 = (t1 as isize + shift) as usize;
                let mut acc = T::zero();
                for (&d, &s) in drow[t0..t1].iter().zip(&xi[s0..s1]) {
                    acc = acc + d * s;
                }
                grad.weight[widx] = grad.weight[widx] + acc;
                if let Some(dx) = dx.as_deref_mut() {
                    let w = lp.weight[widx];
                    for (g, &d) in dx[i * len + s0..i * len + s1].iter_mut().zip(&drow[t0..t1]) {
                        *g = *g + w * d;
                    }
                }
            }
        }
    }
}

fn forward_sample<T: Scalar>(
    spec: &ArchitectureSpec,
    params: &ParameterSet<T>,
    x: &[T],
    samples: usize,
) -> SampleRecord<T> {
    let mut conv = Vec::with_capacity(spec.conv_layers.len());
    let mut len = samples;
    for (l, c) in spec.conv_layers.iter().enumerate() {
        let input: &[T] = conv.last().map_or(x, |r: &ConvRecord<T>| &r.out);
        let mut pre = vec![T::zero(); c.out_channels * len];
        conv_forward(input, len, c, &params.layers[l], &mut pre);
        let act: Vec<T> = pre.iter().map(|v| v.max(T::zero())).collect();
        let (out, argmax, out_len) = if spec.pool_after.contains(&l) {
            let half = len / 2;
            let mut out = Vec::with_capacity(c.out_channels * half);
            let mut arg = Vec::with_capacity(c.out_channels * half);
            for ch in 0..c.out_channels {
                let row = &act[ch * len..(ch + 1) * len];
                for t in 0..half {
                    // earliest index wins ties
                    let (a, b) = (row[2 * t], row[2 * t + 1]);
                    if b > a {
                        out.push(b);
                        arg.push((2 * t + 1) as u32);
                    } else {
                        out.push(a);
                        arg.push((2 * t) as u32);
                    }
                }
            }
            (out, arg, half)
        } else {
            (act, Vec::new(), len)
        };
        conv.push(ConvRecord {
            len,
            pre,
            out,
            argmax,
        });
        len = out_len;
    }

    let channels = spec.feature_dim();
    let last: &[T] = conv.last().map_or(x, |r| &r.out);
    let inv = T::one() / T::from_usize(len).unwrap();
    let features: Vec<T> = (0..channels)
        .map(|ch| last[ch * len..(ch + 1) * len].iter().copied().sum::<T>() * inv)
        .collect();

    let n_conv = spec.conv_layers.len();
    let n_mlp = spec.mlp_layers.len();
    let mut mlp_in = Vec::with_capacity(n_mlp);
    let mut mlp_pre = Vec::with_capacity(n_mlp);
    let mut h = features;
    for (k, l) in spec.mlp_layers.iter().enumerate() {
        let lp = &params.layers[n_conv + k];
        let z: Vec<T> = (0..l.out_dim)
            .map(|o| {
                let row = &lp.weight[o * l.in_dim..(o + 1) * l.in_dim];
                row.iter()
                    .zip(&h)
                    .fold(lp.bias[o], |acc, (&w, &v)| acc + w * v)
            })
            .collect();
        let next: Vec<T> = if k + 1 < n_mlp {
            z.iter().map(|v| v.max(T::zero())).collect()
        } else {
            Vec::new()
        };
        mlp_in.push(std::mem::replace(&mut h, next));
        mlp_pre.push(z);
    }
    let logit = mlp_pre.last().expect("at least one linear layer")[0];
    SampleRecord {
        input: x.to_vec(),
        conv,
        mlp_in,
        mlp_pre,
        logit,
    }
}

fn backward_sample<T: Scalar>(
    spec: &ArchitectureSpec,
    params: &ParameterSet<T>,
    rec: &SampleRecord<T>,
    dlogit: T,
    grad: &mut ParameterSet<T>,
) {
    let n_conv = spec.conv_layers.len();
    let mut delta = vec![dlogit];
    for (k, l) in spec.mlp_layers.iter().enumerate().rev() {
        let lp = &params.layers[n_conv + k];
        let g = &mut grad.layers[n_conv + k];
        let input = &rec.mlp_in[k];
        for (o, &d) in delta.iter().enumerate() {
            g.bias[o] = g.bias[o] + d;
            for (gw, &v) in g.weight[o * l.in_dim..(o + 1) * l.in_dim]
                .iter_mut()
                .zip(input)
            {
                *gw = *gw + d * v;
            }
        }
        let mut dh = vec![T::zero(); l.in_dim];
        for (o, &d) in delta.iter().enumerate() {
            for (acc, &w) in dh
                .iter_mut()
                .zip(&lp.weight[o * l.in_dim..(o + 1) * l.in_dim])
            {
                *acc = *acc + w * d;
            }
        }
        if k > 0 {
            for (v, &z) in dh.iter_mut().zip(&rec.mlp_pre[k - 1]) {
                if z <= T::zero() {
                    *v = T::zero();
                }
            }
        }
        delta = dh;
    }
    if n_conv == 0 {
        return;
    }

    // Global average pool spreads each feature gradient evenly.
    let last = rec.conv.last().unwrap();
    let out_len = last.out.len() / spec.feature_dim();
    let inv = T::one() / T::from_usize(out_len).unwrap();
    let mut dout: Vec<T> = delta
        .iter()
        .flat_map(|&d| std::iter::repeat_n(d * inv, out_len))
        .collect();

    for l in (0..n_conv).rev() {
        let c = &spec.conv_layers[l];
        let r = &rec.conv[l];
        let len = r.len;
        let mut dpre = if r.argmax.is_empty() {
            dout
        } else {
            let half = len / 2;
            let mut d = vec![T::zero(); c.out_channels * len];
            for ch in 0..c.out_channels {
                for t in 0..half {
                    let a = r.argmax[ch * half + t] as usize;
                    d[ch * len + a] = dout[ch * half + t];
                }
            }
            d
        };
        for (d, &z) in dpre.iter_mut().zip(&r.pre) {
            if z <= T::zero() {
                *d = T::zero();
            }
        }
        let input: &[T] = if l == 0 {
            &rec.input
        } else {
            &rec.conv[l - 1].out
        };
        let mut dx = if l > 0 {
            Some(vec![T::zero(); c.in_channels * len])
        } else {
            None
        };
        conv_backward(
            input,
            len,
            c,
            &params.layers[l],
            &dpre,
            &mut grad.layers[l],
            dx.as_deref_mut(),
        );
        dout = dx.unwrap_or_default();
    }
}

fn validate_samples(spec: &ArchitectureSpec, samples: usize) -> Result<()> {
    let mut len = samples;
    for l in 0..spec.conv_layers.len() {
        if spec.pool_after.contains(&l) {
            if len < 2 {
                return Err(NnError::Dimension {
                    layer: format!("pool after conv{l}"),
                    expected: 2,
                    got: len,
                });
            }
            len /= 2;
        }
    }
    Ok(())
}

/// Runs the network on a batch of `2 x S` waveforms (channel-major) and
/// returns sigmoid probabilities with a cache for the backward pass.
pub fn forward<T: Scalar>(
    spec: &ArchitectureSpec,
    params: &ParameterSet<T>,
    inputs: &[&[T]],
) -> Result<(Vec<T>, ForwardCache<T>)> {
    check_params(spec, params)?;
    let samples = infer_samples(inputs)?;
    validate_samples(spec, samples)?;
    let records: Vec<SampleRecord<T>> = inputs
        .par_iter()
        .map(|x| forward_sample(spec, params, x, samples))
        .collect();
    let probs = records.iter().map(|r| sigmoid(r.logit)).collect();
    Ok((probs, ForwardCache { samples: records }))
}

/// Logits only, without keeping a cache.
pub fn predict_logits<T: Scalar>(
    spec: &ArchitectureSpec,
    params: &ParameterSet<T>,
    inputs: &[&[T]],
) -> Result<Vec<T>> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    check_params(spec, params)?;
    let samples = infer_samples(inputs)?;
    validate_samples(spec, samples)?;
    Ok(inputs
        .par_iter()
        .map(|x| forward_sample(spec, params, x, samples).logit)
        .collect())
}

/// Post-GAP feature vectors, one per input.
pub fn pooled_features<T: Scalar>(
    spec: &ArchitectureSpec,
    params: &ParameterSet<T>,
    inputs: &[&[T]],
) -> Result<Vec<Vec<T>>> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    check_params(spec, params)?;
    let samples = infer_samples(inputs)?;
    validate_samples(spec, samples)?;
    Ok(inputs
        .par_iter()
        .map(|x| {
            forward_sample(spec, params, x, samples)
                .mlp_in
                .swap_remove(0)
        })
        .collect())
}

/// Mean binary cross-entropy of a recorded pass and its exact gradient.
pub fn loss_and_grads<T: Scalar>(
    spec: &ArchitectureSpec,
    params: &ParameterSet<T>,
    cache: &ForwardCache<T>,
    labels: &[u8],
) -> Result<(T, ParameterSet<T>)> {
    if labels.len() != cache.len() {
        return Err(NnError::Dimension {
            layer: "labels".into(),
            expected: cache.len(),
            got: labels.len(),
        });
    }
    if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &y)| y > 1) {
        return Err(NnError::Label { index, value });
    }
    check_params(spec, params)?;
    if cache.is_empty() {
        return Ok((T::zero(), params.zeros_like()));
    }
    let n = T::from_usize(cache.len()).unwrap();
    let ys: Vec<T> = labels.iter().map(|&y| T::from_u8(y).unwrap()).collect();
    let loss = cache
        .samples
        .iter()
        .zip(&ys)
        .map(|(r, &y)| bce_with_logits(r.logit, y))
        .sum::<T>()
        / n;

    let pairs: Vec<(&SampleRecord<T>, T)> = cache.samples.iter().zip(ys).collect();
    let partials: Vec<ParameterSet<T>> = pairs
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = params.zeros_like();
            for &(rec, y) in chunk {
                let dlogit = (sigmoid(rec.logit) - y) / n;
                backward_sample(spec, params, rec, dlogit, &mut g);
            }
            g
        })
        .collect();
    let mut iter = partials.into_iter();
    let mut grads = iter.next().unwrap();
    for g in iter {
        grads.add_scaled(&g, T::one());
    }
    Ok((loss, grads))
}

/// Forward and backward in one call.
pub fn value_and_grad<T: Scalar>(
    spec: &ArchitectureSpec,
    params: &ParameterSet<T>,
    inputs: &[&[T]],
    labels: &[u8],
) -> Result<(T, ParameterSet<T>)> {
    let (_, cache) = forward(spec, params, inputs)?;
    loss_and_grads(spec, params, &cache, labels)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::nn::{init_params, ArchName, LinearSpec};

    fn toy_spec() -> ArchitectureSpec {
        ArchitectureSpec::custom(
            ArchName::Mini,
            vec![ConvSpec {
                in_channels: 2,
                out_channels: 1,
                kernel: 3,
            }],
            BTreeSet::new(),
            vec![LinearSpec {
                in_dim: 1,
                out_dim: 1,
            }],
        )
        .unwrap()
    }

    #[test]
    fn toy_network_matches_hand_evaluation() {
        let spec = toy_spec();
        let params = ParameterSet {
            layers: vec![
                LayerParams {
                    weight: vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5],
                    bias: vec![0.1],
                },
                LayerParams {
                    weight: vec![2.0],
                    bias: vec![-1.0],
                },
            ],
        };
        // channel 0: [1, 2, 3, 4], channel 1: [0, 1, 0, -1]
        let x: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0, 0.0, 1.0, 0.0, -1.0];
        // ch0 taps (x[t-1] - x[t+1]) with zero padding: [-2, -2, -2, 3]
        // ch1 taps 0.5*(x[t-1]+x[t]+x[t+1]): [0.5, 0.5, 0, -0.5]
        // pre = sum + 0.1 = [-1.4, -1.4, -1.9, 2.6]; relu -> [0, 0, 0, 2.6]
        // gap = 0.65; logit = 2*0.65 - 1 = 0.3
        let (probs, cache) = forward(&spec, &params, &[&x]).unwrap();
        assert!((cache.logits()[0] - 0.3).abs() < 1e-12);
        assert!((probs[0] - 1.0 / (1.0 + (-0.3f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_half() {
        let spec = ArchitectureSpec::build(ArchName::Mini);
        let params = ParameterSet::<f32>::zeros(&spec);
        let x: Vec<f32> = (0..1000).map(|i| (i as f32 * 0.37).sin()).collect();
        let (probs, cache) = forward(&spec, &params, &[&x, &x]).unwrap();
        assert!(probs.iter().all(|&p| p == 0.5));
        let (loss, _) = loss_and_grads(&spec, &params, &cache, &[1, 0]).unwrap();
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn probabilities_in_open_interval() {
        let spec = ArchitectureSpec::build(ArchName::Small);
        let params = init_params(&spec, 3);
        let x: Vec<f32> = (0..400)
            .map(|i| ((i * 7 % 13) as f32 / 6.5) - 1.0)
            .collect();
        let (probs, _) = forward(&spec, &params, &[&x]).unwrap();
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn bce_is_stable_at_extremes() {
        for &z in &[-50.0f32, -20.0, 0.0, 20.0, 50.0] {
            for &y in &[0.0f32, 1.0] {
                let l = bce_with_logits(z, y);
                assert!(l.is_finite() && l >= 0.0);
            }
        }
        assert!((bce_with_logits(50.0f64, 0.0) - 50.0).abs() < 1e-12);
        assert!(sigmoid(-1000.0f32).is_finite());
    }

    #[test]
    fn duplicated_batch_is_mean_invariant() {
        let spec = ArchitectureSpec::build(ArchName::Mini);
        let params = init_params(&spec, 9).cast::<f64>();
        let a: Vec<f64> = (0..128).map(|i| (i as f64 * 0.21).cos()).collect();
        let b: Vec<f64> = (0..128).map(|i| (i as f64 * 0.05).sin()).collect();
        let (l1, g1) = value_and_grad(&spec, &params, &[&a, &b], &[1, 0]).unwrap();
        let (l2, g2) = value_and_grad(&spec, &params, &[&a, &b, &a, &b], &[1, 0, 1, 0]).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        assert!(g1.max_abs_diff(&g2) < 1e-12);
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let spec = ArchitectureSpec::build(ArchName::Mini);
        let mut params = init_params(&spec, 1);
        params.layers[1].weight.pop();
        let x = vec![0.0f32; 20];
        match forward(&spec, &params, &[&x]) {
            Err(NnError::Dimension { layer, .. }) => assert_eq!(layer, "conv1"),
            other => panic!("unexpected {other:?}"),
        }
        let params = init_params(&spec, 1);
        let y = vec![0.0f32; 22];
        assert!(matches!(
            forward(&spec, &params, &[&x, &y]),
            Err(NnError::Dimension { .. })
        ));
        let (_, cache) = forward(&spec, &params, &[&x]).unwrap();
        assert!(matches!(
            loss_and_grads(&spec, &params, &cache, &[2]),
            Err(NnError::Label { .. })
        ));
    }

    #[test]
    fn max_pool_routes_to_argmax_and_gap_spreads_evenly() {
        // conv (2 -> 1, k=1) with identity on channel 0, pool, GAP, linear 1->1.
        let spec = ArchitectureSpec::custom(
            ArchName::Mini,
            vec![ConvSpec {
                in_channels: 2,
                out_channels: 1,
                kernel: 1,
            }],
            [0].into_iter().collect(),
            vec![LinearSpec {
                in_dim: 1,
                out_dim: 1,
            }],
        )
        .unwrap();
        let params = ParameterSet {
            layers: vec![
                LayerParams {
                    weight: vec![1.0f64, 0.0],
                    bias: vec![0.0],
                },
                LayerParams {
                    weight: vec![1.0],
                    bias: vec![0.0],
                },
            ],
        };
        // pairs (1,3) (5,5) -> argmax 1 and 2 (tie -> earliest)
        let x = vec![1.0, 3.0, 5.0, 5.0, 9.0, 9.0, 9.0, 9.0];
        let (_, cache) = forward(&spec, &params, &[&x]).unwrap();
        let (_, g) = loss_and_grads(&spec, &params, &cache, &[1]).unwrap();
        let dlogit = sigmoid(4.0) - 1.0;
        // d/dw0 = dlogit * (1/2) * (x[1] + x[2]) ; d/dw1 = dlogit * 0.5 * (ch1[1] + ch1[2])
        assert!((g.layers[0].weight[0] - dlogit * 0.5 * (3.0 + 5.0)).abs() < 1e-12);
        assert!((g.layers[0].weight[1] - dlogit * 0.5 * (9.0 + 9.0)).abs() < 1e-12);
        assert!((g.layers[0].bias[0] - dlogit).abs() < 1e-12);
    }
}
