//! Synthetic seismic task sets.
//!
//! A factorial task set has one task per combination of five three-level
//! factors (circles, layers, velocity, frequency, source). Each task holds
//! equal numbers of signal waveforms (a propagated source wavelet embedded in
//! noise at a fixed SNR) and noise-only waveforms. The out-of-distribution
//! set instead sweeps the SNR across bins with a higher-frequency source.

mod archive;
mod partition;
pub mod signal;

use std::io;
use std::path::PathBuf;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::FormatError;
use crate::seed::{self, stream};

pub use archive::{load_archive, save_archive, ARCHIVE_VERSION, MANIFEST_FILE};
pub(crate) use partition::interleave;
pub use partition::{partition_task, Partitions};
pub use signal::{
    embed_signal, place_onset, surrogate_propagate, synth_noise, wavelet, Embedding, PureSignal,
    SAMPLE_RATE,
};

pub const DEFAULT_SAMPLES: usize = 500;
pub const CHANNELS: usize = 2;
/// Pure-to-noise power ratio of every factorial signal waveform.
pub const FACTORIAL_SNR: f64 = 0.2;
pub const OOD_SNR_RANGE: (f64, f64) = (1.0 / 20.0, 2.0);
pub const OOD_FREQUENCY: (f64, f64) = (15.0, 25.0);
pub const COUNT_LEVELS: [u8; 3] = [0, 2, 4];

#[derive(Debug, Error)]
pub enum TaskgenError {
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("degenerate input: {0} is identically zero")]
    Degenerate(&'static str),
    #[error("task {task}: N={n} needs {required} waveforms per class, only {available} available")]
    Sizing {
        task: usize,
        n: usize,
        required: usize,
        available: usize,
    },
    #[error("{}: {source}", path.display())]
    Format { path: PathBuf, source: FormatError },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

pub type Result<T> = std::result::Result<T, TaskgenError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Velocity {
    Lo,
    Hi,
    LoHi,
}

impl Velocity {
    pub const ALL: [Velocity; 3] = [Velocity::Lo, Velocity::Hi, Velocity::LoHi];

    /// km/s
    pub fn range(self) -> (f64, f64) {
        match self {
            Velocity::Lo => (1.5, 3.75),
            Velocity::Hi => (3.75, 6.0),
            Velocity::LoHi => (1.5, 6.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frequency {
    Lo,
    Hi,
    LoHi,
}

impl Frequency {
    pub const ALL: [Frequency; 3] = [Frequency::Lo, Frequency::Hi, Frequency::LoHi];

    /// Hz
    pub fn range(self) -> (f64, f64) {
        match self {
            Frequency::Lo => (1.0, 8.0),
            Frequency::Hi => (8.0, 15.0),
            Frequency::LoHi => (1.0, 15.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Ricker,
    Spike,
    Gabor,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Ricker, Source::Spike, Source::Gabor];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactorLevels {
    pub circles: u8,
    pub layers: u8,
    pub velocity: Velocity,
    pub frequency: Frequency,
    pub source: Source,
}

impl FactorLevels {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("circles", self.circles), ("layers", self.layers)] {
            if !COUNT_LEVELS.contains(&v) {
                return Err(TaskgenError::Invalid(format!(
                    "{name} must be 0, 2 or 4, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Which factor combinations become tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    /// All 3^5 = 243 combinations.
    Full,
    /// 3^3 = 27 combinations of circles, frequency and source with two
    /// layers and the full velocity range.
    Desk,
}

impl Design {
    /// Design points in a fixed order (last factor varies fastest).
    pub fn levels(self) -> Vec<FactorLevels> {
        let (layers, velocities): (&[u8], &[Velocity]) = match self {
            Design::Full => (&COUNT_LEVELS, &Velocity::ALL),
            Design::Desk => (&[2], &[Velocity::LoHi]),
        };
        let mut out = Vec::new();
        for &circles in &COUNT_LEVELS {
            for &layers in layers {
                for &velocity in velocities {
                    for frequency in Frequency::ALL {
                        for source in Source::ALL {
                            out.push(FactorLevels {
                                circles,
                                layers,
                                velocity,
                                frequency,
                                source,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSetKind {
    Factorial,
    OodSnr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GenerationConfig {
    Factorial {
        design: Design,
        reps_per_class: usize,
        samples: usize,
        master_seed: u64,
    },
    OodSnr {
        n_bins: usize,
        reps_per_class: usize,
        samples: usize,
        master_seed: u64,
        snr_min: f64,
        snr_max: f64,
    },
}

impl GenerationConfig {
    pub fn kind(&self) -> TaskSetKind {
        match self {
            GenerationConfig::Factorial { .. } => TaskSetKind::Factorial,
            GenerationConfig::OodSnr { .. } => TaskSetKind::OodSnr,
        }
    }

    pub fn samples(&self) -> usize {
        match *self {
            GenerationConfig::Factorial { samples, .. }
            | GenerationConfig::OodSnr { samples, .. } => samples,
        }
    }

    pub fn reps_per_class(&self) -> usize {
        match *self {
            GenerationConfig::Factorial { reps_per_class, .. }
            | GenerationConfig::OodSnr { reps_per_class, .. } => reps_per_class,
        }
    }

    pub fn master_seed(&self) -> u64 {
        match *self {
            GenerationConfig::Factorial { master_seed, .. }
            | GenerationConfig::OodSnr { master_seed, .. } => master_seed,
        }
    }
}

/// A labelled collection of `2 x S` waveforms. Signals come first, then
/// noise-only waveforms.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: usize,
    pub seed: u64,
    /// Factor levels; absent for out-of-distribution tasks.
    pub factors: Option<FactorLevels>,
    /// Per-waveform SNR draw range; present for out-of-distribution tasks.
    pub snr_range: Option<(f64, f64)>,
    pub samples: usize,
    pub labels: Vec<u8>,
    /// Waveform-major, channel-major, sample-minor.
    pub data: Vec<f32>,
    /// Partitions keyed by samples-per-class `N`.
    pub partitions: std::collections::BTreeMap<usize, Partitions>,
}

impl Task {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_ood(&self) -> bool {
        self.factors.is_none()
    }

    pub fn waveform(&self, i: usize) -> &[f32] {
        let w = CHANNELS * self.samples;
        &self.data[i * w..(i + 1) * w]
    }

    /// Borrowed inputs and labels for the given waveform indices.
    pub fn batch(&self, indices: &[usize]) -> (Vec<&[f32]>, Vec<u8>) {
        (
            indices.iter().map(|&i| self.waveform(i)).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let pos = self.labels.iter().filter(|&&y| y == 1).count();
        [self.labels.len() - pos, pos]
    }

    pub fn partition(&self, n: usize) -> Option<&Partitions> {
        self.partitions.get(&n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSet {
    pub config: GenerationConfig,
    pub tasks: Vec<Task>,
    /// Test/pool split, once shift analysis has produced one.
    pub splits: Option<crate::shift::SplitAssignment>,
}

impl TaskSet {
    pub fn kind(&self) -> TaskSetKind {
        self.config.kind()
    }

    pub fn samples(&self) -> usize {
        self.config.samples()
    }

    /// Partitions every task for each `N` in `ns`.
    pub fn partition_all(&mut self, ns: &[usize], seed: u64) -> Result<()> {
        for task in &mut self.tasks {
            for &n in ns {
                let p = partition_task(task, n, seed)?;
                task.partitions.insert(n, p);
            }
        }
        Ok(())
    }
}

/// Everything that went into one signal waveform.
#[derive(Debug, Clone)]
pub struct RenderedSignal {
    pub factors: FactorLevels,
    pub frequency: f64,
    pub pure: PureSignal,
    pub embedding: Embedding,
}

fn draw_levels(rng: &mut seed::Rng) -> FactorLevels {
    FactorLevels {
        circles: COUNT_LEVELS[rng.random_range(0..3)],
        layers: COUNT_LEVELS[rng.random_range(0..3)],
        velocity: Velocity::ALL[rng.random_range(0..3)],
        frequency: Frequency::ALL[rng.random_range(0..3)],
        source: Source::ALL[rng.random_range(0..3)],
    }
}

/// Re-derives signal waveform `rep` of `task` from its seed, keeping the
/// intermediate buffers.
pub fn render_signal(task: &Task, rep: usize) -> Result<RenderedSignal> {
    let mut srng = seed::rng_at(task.seed, &[stream::SIGNAL, rep as u64]);
    let mut nrng = seed::rng_at(task.seed, &[stream::NOISE, rep as u64]);
    let (factors, (flo, fhi), snr) = match (task.factors, task.snr_range) {
        (Some(f), _) => (f, f.frequency.range(), FACTORIAL_SNR),
        (None, Some((lo, hi))) => {
            let snr = (srng.random_range(lo.ln()..=hi.ln())).exp();
            (draw_levels(&mut srng), OOD_FREQUENCY, snr)
        }
        (None, None) => {
            return Err(TaskgenError::Invalid(format!(
                "task {} has no recipe",
                task.id
            )))
        }
    };
    let frequency = srng.random_range(flo..=fhi);
    let w = wavelet(
        factors.source,
        frequency,
        signal::DT,
        2 * signal::WAVELET_HALF + 1,
    )?;
    let mut pure = surrogate_propagate(&w, &factors, task.samples, &mut srng)?;
    place_onset(&mut pure, &mut srng);
    let noise = synth_noise(&mut nrng, task.samples);
    let embedding = embed_signal(&pure.data, &noise, snr)?;
    Ok(RenderedSignal {
        factors,
        frequency,
        pure,
        embedding,
    })
}

/// Noise-only waveform `rep` of `task`, normalised to unit peak.
pub fn render_noise(task: &Task, rep: usize, reps_per_class: usize) -> Result<Vec<f32>> {
    let mut nrng = seed::rng_at(task.seed, &[stream::NOISE, (reps_per_class + rep) as u64]);
    signal::normalize_peak(&synth_noise(&mut nrng, task.samples), "noise")
}

fn fill_task(mut task: Task, reps: usize) -> Result<Task> {
    let width = CHANNELS * task.samples;
    let mut data = Vec::with_capacity(2 * reps * width);
    for rep in 0..reps {
        data.extend_from_slice(&render_signal(&task, rep)?.embedding.data);
    }
    for rep in 0..reps {
        data.extend_from_slice(&render_noise(&task, rep, reps)?);
    }
    task.labels = std::iter::repeat_n(1u8, reps)
        .chain(std::iter::repeat_n(0u8, reps))
        .collect();
    task.data = data;
    Ok(task)
}

fn check_sizes(reps: usize, samples: usize) -> Result<()> {
    if reps == 0 {
        return Err(TaskgenError::Invalid(
            "reps_per_class must be at least 1".into(),
        ));
    }
    if samples < 10 {
        return Err(TaskgenError::Invalid(format!(
            "samples must be at least 10, got {samples}"
        )));
    }
    Ok(())
}

fn empty_task(id: usize, seed: u64, samples: usize) -> Task {
    Task {
        id,
        seed,
        factors: None,
        snr_range: None,
        samples,
        labels: Vec::new(),
        data: Vec::new(),
        partitions: Default::default(),
    }
}

/// One task per design point, each with `reps` signal and `reps` noise
/// waveforms. Tasks are generated in parallel from per-task seeds, so the
/// result does not depend on the thread count.
pub fn generate_taskset(
    design: Design,
    reps: usize,
    samples: usize,
    master_seed: u64,
) -> Result<TaskSet> {
    check_sizes(reps, samples)?;
    let tasks = design
        .levels()
        .into_par_iter()
        .enumerate()
        .map(|(id, factors)| {
            let mut t = empty_task(
                id,
                seed::derive_path(master_seed, &[stream::TASK, id as u64]),
                samples,
            );
            t.factors = Some(factors);
            fill_task(t, reps)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskSet {
        config: GenerationConfig::Factorial {
            design,
            reps_per_class: reps,
            samples,
            master_seed,
        },
        tasks,
        splits: None,
    })
}

/// Log-spaced SNR bin edges.
pub fn snr_bin_edges(n_bins: usize, lo: f64, hi: f64) -> Vec<f64> {
    let r = (hi / lo).ln();
    (0..=n_bins)
        .map(|b| lo * (r * b as f64 / n_bins as f64).exp())
        .collect()
}

/// `n_bins` tasks of increasing SNR. Signal waveforms draw their SNR
/// log-uniformly within the task's bin, their source frequency from
/// 15-25 Hz and their remaining factor levels at random.
pub fn generate_ood_taskset(
    n_bins: usize,
    reps: usize,
    samples: usize,
    master_seed: u64,
) -> Result<TaskSet> {
    check_sizes(reps, samples)?;
    if n_bins == 0 {
        return Err(TaskgenError::Invalid("n_bins must be at least 1".into()));
    }
    let (lo, hi) = OOD_SNR_RANGE;
    let edges = snr_bin_edges(n_bins, lo, hi);
    let tasks = (0..n_bins)
        .into_par_iter()
        .map(|id| {
            let mut t = empty_task(
                id,
                seed::derive_path(master_seed, &[stream::OOD, id as u64]),
                samples,
            );
            t.snr_range = Some((edges[id], edges[id + 1]));
            fill_task(t, reps)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskSet {
        config: GenerationConfig::OodSnr {
            n_bins,
            reps_per_class: reps,
            samples,
            master_seed,
            snr_min: lo,
            snr_max: hi,
        },
        tasks,
        splits: None,
    })
}
