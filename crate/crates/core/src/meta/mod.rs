//! Training procedures: Reptile, first-order MAML, pooled task-agnostic
//! training (TDL) and per-task training from scratch (D&C), sharing one
//! early-stopping and logging scheme.

mod steps;
mod train;

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{ArchName, NnError};
use crate::shift::ShiftError;
use crate::taskgen::TaskgenError;

pub use steps::{
    draw_pairs, fomaml_meta_gradient, inner_adapt, reptile_meta_gradient, stratified_split, Episode,
};
pub use train::{
    dnc_train, fomaml_train, reptile_train, run_ensemble, tdl_train, train_member, MetaSplit,
    Target, Trained,
};

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("cannot split {len} samples into {steps} inner batches")]
    BatchSizing { len: usize, steps: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("task {task} has no partitions for N={n}")]
    MissingPartition { task: usize, n: usize },
    #[error("task {task}: need {required} samples per class, found {available}")]
    Insufficient {
        task: usize,
        required: usize,
        available: usize,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Shift(#[from] ShiftError),
    #[error(transparent)]
    Taskgen(#[from] TaskgenError),
}

pub type Result<T> = std::result::Result<T, MetaError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Reptile,
    Fomaml,
    Tdl,
    Dnc,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Reptile,
        Algorithm::Fomaml,
        Algorithm::Tdl,
        Algorithm::Dnc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Reptile => "reptile",
            Algorithm::Fomaml => "fomaml",
            Algorithm::Tdl => "tdl",
            Algorithm::Dnc => "dnc",
        }
    }

    pub fn is_meta(self) -> bool {
        matches!(self, Algorithm::Reptile | Algorithm::Fomaml)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                format!("unknown algorithm {s:?} (expected reptile, fomaml, tdl or dnc)")
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    Uniform,
    Diverse,
}

impl Sampling {
    pub fn as_str(self) -> &'static str {
        match self {
            Sampling::Uniform => "uniform",
            Sampling::Diverse => "diverse",
        }
    }
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sampling {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uniform" => Ok(Sampling::Uniform),
            "diverse" => Ok(Sampling::Diverse),
            _ => Err(format!(
                "unknown sampling {s:?} (expected uniform or diverse)"
            )),
        }
    }
}

pub const DEFAULT_N_VALUES: [usize; 6] = [5, 10, 20, 30, 40, 50];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub algorithm: Algorithm,
    pub architecture: ArchName,
    /// Samples per class per partition.
    pub n: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub task_batch: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub ensembles: usize,
    pub sampling: Sampling,
    pub seed: u64,
    /// Mini-batch size of the TDL and D&C trainers.
    pub batch_size: usize,
    /// Fraction of each class kept for training in the TDL and D&C splits.
    pub train_fraction: f64,
}

impl MetaConfig {
    /// Defaults for `algorithm`: alpha 1e-2, beta 5e-4, five inner steps,
    /// task batches of five, patience 200 (150 for D&C), twenty ensemble
    /// members (ten for D&C).
    pub fn new(algorithm: Algorithm, architecture: ArchName, n: usize) -> Self {
        let dnc = algorithm == Algorithm::Dnc;
        Self {
            algorithm,
            architecture,
            n,
            inner_lr: 1e-2,
            outer_lr: 5e-4,
            inner_steps: 5,
            task_batch: 5,
            patience: if dnc { 150 } else { 200 },
            max_epochs: 5000,
            ensembles: if dnc { 10 } else { 20 },
            sampling: Sampling::Uniform,
            seed: 0,
            batch_size: 16,
            train_fraction: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MetaError::Config(m));
        if self.n == 0 {
            return bad("N must be at least 1".into());
        }
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return bad(format!(
                "inner_lr must be non-negative, got {}",
                self.inner_lr
            ));
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return bad(format!("outer_lr must be positive, got {}", self.outer_lr));
        }
        if self.inner_steps == 0 || self.task_batch == 0 || self.batch_size == 0 {
            return bad("inner_steps, task_batch and batch_size must be at least 1".into());
        }
        if self.patience == 0 || self.max_epochs == 0 || self.ensembles == 0 {
            return bad("patience, max_epochs and ensembles must be at least 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            ));
        }
        if self.algorithm == Algorithm::Tdl && self.sampling != Sampling::Uniform {
            return bad("TDL pools all tasks and supports uniform sampling only".into());
        }
        Ok(())
    }
}

/// Patience-based stopping on a validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopState {
    pub best: f64,
    pub best_epoch: usize,
    pub since_improvement: usize,
    pub patience: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        Self {
            best: f64::INFINITY,
            best_epoch: 0,
            since_improvement: 0,
            patience,
        }
    }

    /// Records the loss of `epoch`; returns whether it improved on the best.
    pub fn update(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_improvement = 0;
            true
        } else {
            self.since_improvement += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_improvement >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_loss: f64,
    /// Meta-updates (Reptile, FOMAML) or optimizer steps (TDL, D&C) in the
    /// epoch.
    pub pseudo_epochs: usize,
    /// Wall time since training started.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainLog {
    /// Per-epoch table. Wall times are left out so that reruns write
    /// identical files.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,val_loss,pseudo_epochs\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{:.9e},{}", r.epoch, r.val_loss, r.pseudo_epochs);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stop_counts_patience() {
        let mut es = EarlyStopState::new(3);
        assert!(es.update(1, 1.0));
        assert!(es.update(2, 0.5));
        for e in 3..=5 {
            assert!(!es.should_stop());
            assert!(!es.update(e, 0.7));
        }
        assert!(es.should_stop());
        assert_eq!(es.best_epoch, 2);
    }

    #[test]
    fn defaults() {
        let c = MetaConfig::new(Algorithm::Dnc, ArchName::Mini, 5);
        assert_eq!((c.patience, c.ensembles), (150, 10));
        let c = MetaConfig::new(Algorithm::Reptile, ArchName::Mini, 5);
        assert_eq!(
            (c.patience, c.ensembles, c.inner_lr, c.outer_lr),
            (200, 20, 1e-2, 5e-4)
        );
        c.validate().unwrap();
        let mut t = MetaConfig::new(Algorithm::Tdl, ArchName::Mini, 5);
        t.sampling = Sampling::Diverse;
        assert!(t.validate().is_err());
    }

    #[test]
    fn names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.as_str().parse::<Algorithm>().unwrap(), a);
        }
        assert!("maml".parse::<Algorithm>().is_err());
    }
}
