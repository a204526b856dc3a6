//! Wavelets, the surrogate propagation model, synthetic noise and SNR
//! embedding. Signals are `2 x S` channel-major `f64` buffers until they are
//! normalised and stored as `f32`.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{FactorLevels, Result, Source, TaskgenError};
use crate::seed::Rng;

pub const SAMPLE_RATE: f64 = 100.0;
pub const DT: f64 = 1.0 / SAMPLE_RATE;
/// Wavelets are rendered on `2 * WAVELET_HALF + 1` samples centred on `t = 0`.
pub const WAVELET_HALF: usize = 200;
pub const SPIKE_STD: f64 = 0.05;
/// Spike onset offset is `SPIKE_OFFSET / f` seconds after the reference time.
pub const SPIKE_OFFSET: f64 = 0.2;
/// Source-receiver distance used for the shear (S-P) delay, km.
pub const NOTIONAL_DISTANCE: f64 = 1.0;
pub const NOISE_POLE_MAX: f64 = 0.9;

/// Source wavelet of `n` samples with `t = 0` at index `n / 2`, scaled to
/// unit peak amplitude.
pub fn wavelet(kind: Source, f: f64, dt: f64, n: usize) -> Result<Vec<f64>> {
    if !(f > 0.0 && f.is_finite()) {
        return Err(TaskgenError::Invalid(format!(
            "wavelet frequency must be positive, got {f}"
        )));
    }
    if !(dt > 0.0 && dt.is_finite()) || n == 0 {
        return Err(TaskgenError::Invalid(format!(
            "wavelet grid dt={dt}, n={n}"
        )));
    }
    let c = (n / 2) as f64;
    let pi2f2 = (std::f64::consts::PI * f).powi(2);
    let mut w: Vec<f64> = (0..n)
        .map(|i| {
            let t = (i as f64 - c) * dt;
            match kind {
                Source::Ricker => (1.0 - 2.0 * pi2f2 * t * t) * (-pi2f2 * t * t).exp(),
                Source::Gabor => {
                    let sigma = 1.0 / (2.0 * f);
                    (2.0 * std::f64::consts::PI * f * t).cos()
                        * (-t * t / (2.0 * sigma * sigma)).exp()
                }
                Source::Spike => {
                    let u = t - SPIKE_OFFSET / f;
                    (-u * u / (2.0 * SPIKE_STD * SPIKE_STD)).exp()
                }
            }
        })
        .collect();
    let peak = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(TaskgenError::Degenerate("wavelet"));
    }
    w.iter_mut().for_each(|v| *v /= peak);
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrivalKind {
    Direct,
    Reflection,
    Diffraction,
}

/// One spike of the reflectivity sequence on the vertical component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub kind: ArrivalKind,
    /// Seconds after the direct arrival.
    pub delay: f64,
    pub amplitude: f64,
}

/// A noise-free two-component trace and the recipe that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PureSignal {
    pub samples: usize,
    pub wavelet: Vec<f64>,
    pub arrivals: Vec<Arrival>,
    pub velocity: f64,
    /// Delay of the horizontal copy, seconds.
    pub shear_delay: f64,
    pub shear_gain: f64,
    /// Sample index of the direct arrival.
    pub onset: usize,
    pub data: Vec<f64>,
}

impl PureSignal {
    fn render(&mut self) {
        let s = self.samples;
        self.data.clear();
        self.data.resize(2 * s, 0.0);
        let shear = (self.shear_delay * SAMPLE_RATE).round() as usize;
        let (vertical, horizontal) = self.data.split_at_mut(s);
        for a in &self.arrivals {
            let at = self.onset + (a.delay * SAMPLE_RATE).round() as usize;
            stamp(vertical, &self.wavelet, at, a.amplitude);
            stamp(
                horizontal,
                &self.wavelet,
                at + shear,
                a.amplitude * self.shear_gain,
            );
        }
    }
}

/// Adds `amp * w` centred at `at`, clipped to the trace.
fn stamp(trace: &mut [f64], w: &[f64], at: usize, amp: f64) {
    let c = w.len() / 2;
    let start = at.saturating_sub(c);
    let end = (at + w.len() - c).min(trace.len());
    for i in start..end {
        trace[i] += amp * w[i + c - at];
    }
}

fn random_sign(rng: &mut Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Convolves `wavelet` with a sparse random reflectivity: the direct wave,
/// one reflection per layer interface and one diffraction per circle, with
/// delays proportional to distance over a velocity drawn from the factor's
/// range. The horizontal component is an attenuated copy delayed by the
/// shear lag. The direct arrival sits at `samples / 10` until
/// [`place_onset`] moves it.
pub fn surrogate_propagate(
    wavelet: &[f64],
    factors: &FactorLevels,
    samples: usize,
    rng: &mut Rng,
) -> Result<PureSignal> {
    factors.validate()?;
    if samples == 0 {
        return Err(TaskgenError::Invalid("samples must be positive".into()));
    }
    let (vlo, vhi) = factors.velocity.range();
    let v = rng.random_range(vlo..=vhi);
    let mut arrivals = vec![Arrival {
        kind: ArrivalKind::Direct,
        delay: 0.0,
        amplitude: 1.0,
    }];
    for _ in 0..factors.layers {
        let depth = rng.random_range(0.05..1.5);
        let contrast = rng.random_range(0.05..0.5);
        arrivals.push(Arrival {
            kind: ArrivalKind::Reflection,
            delay: 2.0 * depth / v,
            amplitude: random_sign(rng) * contrast,
        });
    }
    for _ in 0..factors.circles {
        let radius_m = rng.random_range(10.0..50.0);
        let extra_path = rng.random_range(0.1..2.0);
        arrivals.push(Arrival {
            kind: ArrivalKind::Diffraction,
            delay: extra_path / v,
            amplitude: random_sign(rng) * radius_m / 100.0,
        });
    }
    let shear_gain = rng.random_range(0.3..0.9);
    let mut pure = PureSignal {
        samples,
        wavelet: wavelet.to_vec(),
        arrivals,
        velocity: v,
        shear_delay: NOTIONAL_DISTANCE * (3f64.sqrt() - 1.0) / v,
        shear_gain,
        onset: samples / 10,
        data: Vec::new(),
    };
    pure.render();
    Ok(pure)
}

/// Inclusive range of admissible onset indices: 0.5 s to 4.5 s at the
/// default length, i.e. a tenth of the trace from either end.
pub fn onset_range(samples: usize) -> (usize, usize) {
    (samples / 10, samples * 9 / 10)
}

/// Moves the direct arrival to a uniform random index and re-renders with
/// zero fill.
pub fn place_onset(pure: &mut PureSignal, rng: &mut Rng) {
    let (lo, hi) = onset_range(pure.samples);
    pure.onset = rng.random_range(lo..=hi);
    pure.render();
}

/// Two independent AR(1) components sharing one pole drawn uniformly in
/// `[0, 0.9]`; started from the stationary distribution.
pub fn synth_noise(rng: &mut Rng, samples: usize) -> Vec<f64> {
    let pole = rng.random_range(0.0..=NOISE_POLE_MAX);
    let stationary_std = (1.0 - pole * pole).sqrt().recip();
    let mut out = Vec::with_capacity(2 * samples);
    for _ in 0..2 {
        let z: f64 = StandardNormal.sample(rng);
        let mut x = stationary_std * z;
        for _ in 0..samples {
            out.push(x);
            let e: f64 = StandardNormal.sample(rng);
            x = pole * x + e;
        }
    }
    out
}

/// Mean-square power of each component.
pub fn component_powers(x: &[f64]) -> [f64; 2] {
    let s = x.len() / 2;
    let p = |c: &[f64]| c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64;
    [p(&x[..s]), p(&x[s..])]
}

pub fn max_component_power(x: &[f64]) -> f64 {
    let [a, b] = component_powers(x);
    a.max(b)
}

/// Scales to unit peak absolute value and converts to storage precision.
pub fn normalize_peak(x: &[f64], what: &'static str) -> Result<Vec<f32>> {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 || !peak.is_finite() {
        return Err(TaskgenError::Degenerate(what));
    }
    Ok(x.iter().map(|v| (v / peak) as f32).collect())
}

/// Intermediate and final buffers of one signal embedding.
#[derive(Debug, Clone)]
pub struct Embedding {
    /// Pure signal scaled to unit max-component power.
    pub pure: Vec<f64>,
    /// Noise scaled to max-component power `1 / snr`.
    pub noise: Vec<f64>,
    pub data: Vec<f32>,
    /// Max-component power ratio of `pure` to `noise`.
    pub snr: f64,
}

/// Scales `pure` to unit max-component power and `noise` to `1 / snr`, sums
/// them and rescales the sum to unit peak amplitude.
pub fn embed_signal(pure: &[f64], noise: &[f64], snr: f64) -> Result<Embedding> {
    if pure.len() != noise.len() || pure.len() % 2 != 0 {
        return Err(TaskgenError::Invalid(format!(
            "signal length {} and noise length {} differ or are odd",
            pure.len(),
            noise.len()
        )));
    }
    if !(snr > 0.0 && snr.is_finite()) {
        return Err(TaskgenError::Invalid(format!(
            "snr must be positive, got {snr}"
        )));
    }
    let ps = max_component_power(pure);
    if ps == 0.0 {
        return Err(TaskgenError::Degenerate("pure signal"));
    }
    let pn = max_component_power(noise);
    if pn == 0.0 {
        return Err(TaskgenError::Degenerate("noise"));
    }
    let gs = ps.sqrt().recip();
    let gn = (1.0 / (snr * pn)).sqrt();
    let pure: Vec<f64> = pure.iter().map(|v| v * gs).collect();
    let noise: Vec<f64> = noise.iter().map(|v| v * gn).collect();
    let mixed: Vec<f64> = pure.iter().zip(&noise).map(|(a, b)| a + b).collect();
    let data = normalize_peak(&mixed, "mixed signal")?;
    let snr = max_component_power(&pure) / max_component_power(&noise);
    Ok(Embedding {
        pure,
        noise,
        data,
        snr,
    })
}
