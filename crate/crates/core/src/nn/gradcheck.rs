use super::{
    bce_with_logits, forward, init_params, loss_and_grads, ArchitectureSpec, ParameterSet, Result,
};

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many evenly spaced entries per weight or bias
    /// tensor; `None` checks everything.
    pub max_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_per_tensor: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Entries whose probes at `eps` crossed a ReLU or max-pool switch and
    /// were re-measured with a smaller step.
    pub refined: usize,
    /// Entries that still crossed a switch at the smallest step. The loss is
    /// not differentiable within the probe, so they are left out.
    pub skipped_kinks: usize,
    /// (layer, is_bias, index) of the worst entry.
    pub worst: Option<(usize, bool, usize)>,
}

fn probe_indices(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < len => (0..c).map(|k| k * len / c + (len / c) / 2).collect(),
        _ => (0..len).collect(),
    }
}

/// `eps`, then three successively 10x smaller steps.
fn probe_steps(eps: f64) -> impl Iterator<Item = f64> {
    (0..4).map(move |k| eps / 10f64.powi(k))
}

fn set_entry(p: &mut ParameterSet<f64>, layer: usize, is_bias: bool, idx: usize, value: f64) {
    let l = &mut p.layers[layer];
    if is_bias {
        l.bias[idx] = value;
    } else {
        l.weight[idx] = value;
    }
}

fn loss_at(
    spec: &ArchitectureSpec,
    params: &ParameterSet<f64>,
    inputs: &[&[f64]],
    labels: &[u8],
) -> Result<(f64, u64)> {
    let (_, cache) = forward(spec, params, inputs)?;
    let loss = cache
        .logits()
        .into_iter()
        .zip(labels)
        .map(|(z, &y)| bce_with_logits(z, y as f64))
        .sum::<f64>()
        / labels.len() as f64;
    Ok((loss, cache.pattern_signature()))
}

/// Compares analytic gradients of the network initialised from `seed`
/// against central differences, in `f64`.
pub fn gradient_check(
    spec: &ArchitectureSpec,
    seed: u64,
    inputs: &[&[f64]],
    labels: &[u8],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let params = init_params(spec, seed).cast::<f64>();
    let (_, cache) = forward(spec, &params, inputs)?;
    let base_signature = cache.pattern_signature();
    let (_, grads) = loss_and_grads(spec, &params, &cache, labels)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        refined: 0,
        skipped_kinks: 0,
        worst: None,
    };
    let mut probe = params.clone();
    for (li, layer) in params.layers.iter().enumerate() {
        for is_bias in [false, true] {
            let values = if is_bias { &layer.bias } else { &layer.weight };
            for idx in probe_indices(values.len(), opts.max_per_tensor) {
                let original = values[idx];
                let mut numeric = None;
                for (attempt, step) in probe_steps(opts.eps).enumerate() {
                    set_entry(&mut probe, li, is_bias, idx, original + step);
                    let (plus, sig_plus) = loss_at(spec, &probe, inputs, labels)?;
                    set_entry(&mut probe, li, is_bias, idx, original - step);
                    let (minus, sig_minus) = loss_at(spec, &probe, inputs, labels)?;
                    set_entry(&mut probe, li, is_bias, idx, original);
                    if sig_plus == base_signature && sig_minus == base_signature {
                        if attempt > 0 {
                            report.refined += 1;
                        }
                        numeric = Some((plus - minus) / (2.0 * step));
                        break;
                    }
                }
                let Some(numeric) = numeric else {
                    report.skipped_kinks += 1;
                    continue;
                };
                let g = &grads.layers[li];
                let analytic = if is_bias { g.bias[idx] } else { g.weight[idx] };
                let rel =
                    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
                report.checked += 1;
                if rel > report.max_relative_error {
                    report.max_relative_error = rel;
                    report.worst = Some((li, is_bias, idx));
                }
            }
        }
    }
    Ok(report)
}
