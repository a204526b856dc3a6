//! Settings from a TOML file and command-line flags. Flags win over the
//! file, the file over `METASHIFT_OUT`, and that over built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use metashift_core::eval::DEFAULT_K_VALUES;
use metashift_core::meta::{Algorithm, MetaConfig, Sampling, DEFAULT_N_VALUES};
use metashift_core::nn::ArchName;

use crate::failure;

pub const DEFAULT_OUT: &str = "metashift-out";
pub const OUT_ENV: &str = "METASHIFT_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TaskChoice {
    /// All 243 factor combinations.
    Full,
    /// 27-task desk design.
    Mini,
    /// SNR-binned out-of-distribution tasks.
    Ood,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub generate: GenerateFile,
    #[serde(default)]
    pub shift: ShiftFile,
    #[serde(default)]
    pub train: TrainFile,
    #[serde(default)]
    pub eval: EvalFile,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateFile {
    pub tasks: Option<TaskChoice>,
    pub reps: Option<usize>,
    pub samples: Option<usize>,
    pub n_values: Option<Vec<usize>>,
    pub ood_bins: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftFile {
    pub n: Option<usize>,
    pub ensembles: Option<usize>,
    pub architecture: Option<ArchName>,
    pub bins: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub algorithms: Option<Vec<Algorithm>>,
    pub architectures: Option<Vec<ArchName>>,
    pub n_values: Option<Vec<usize>>,
    pub samplings: Option<Vec<Sampling>>,
    pub seeds: Option<Vec<u64>>,
    pub ensembles: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub inner_lr: Option<f64>,
    pub outer_lr: Option<f64>,
    pub inner_steps: Option<usize>,
    pub task_batch: Option<usize>,
    pub batch_size: Option<usize>,
    pub validation_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFile {
    pub k_values: Option<Vec<usize>>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text)
            .map_err(|e| failure::validation(format!("config {}: {e}", path.display())))
    }
}

/// Settings shared by every subcommand.
#[derive(Debug, Clone, Serialize)]
pub struct Global {
    pub seed: u64,
    pub jobs: Option<usize>,
    pub out: PathBuf,
}

impl Global {
    pub fn resolve(
        seed: Option<u64>,
        jobs: Option<usize>,
        out: Option<PathBuf>,
        file: &FileConfig,
    ) -> Result<Self> {
        let jobs = jobs.or(file.jobs);
        if jobs == Some(0) {
            return Err(failure::validation("--jobs must be at least 1"));
        }
        let out = out
            .or_else(|| file.out.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        Ok(Self {
            seed: seed.or(file.seed).unwrap_or(0),
            jobs,
            out,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerateSettings {
    pub tasks: TaskChoice,
    pub reps: usize,
    pub samples: usize,
    /// Training amounts to partition for.
    pub n_values: Vec<usize>,
    pub ood_bins: usize,
}

impl GenerateSettings {
    pub fn resolve(
        tasks: Option<TaskChoice>,
        reps: Option<usize>,
        samples: Option<usize>,
        n_values: Option<Vec<usize>>,
        ood_bins: Option<usize>,
        file: &GenerateFile,
    ) -> Self {
        let tasks = tasks.or(file.tasks).unwrap_or(TaskChoice::Mini);
        let reps = reps.or(file.reps).unwrap_or(210);
        let per_class = |n: usize| {
            if tasks == TaskChoice::Ood {
                n + 1
            } else {
                3 * n + 1
            }
        };
        let n_values = n_values
            .or_else(|| file.n_values.clone())
            .unwrap_or_else(|| {
                DEFAULT_N_VALUES
                    .into_iter()
                    .filter(|&n| per_class(n) <= reps)
                    .collect()
            });
        Self {
            tasks,
            reps,
            samples: samples
                .or(file.samples)
                .unwrap_or(metashift_core::taskgen::DEFAULT_SAMPLES),
            n_values,
            ood_bins: ood_bins.or(file.ood_bins).unwrap_or(35),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftSettings {
    /// Training amount of the task-specific models.
    pub n: usize,
    pub ensembles: usize,
    pub architecture: ArchName,
    /// Bins of the similarity-versus-accuracy table.
    pub bins: usize,
}

impl ShiftSettings {
    pub fn resolve(
        n: Option<usize>,
        ensembles: Option<usize>,
        architecture: Option<ArchName>,
        bins: Option<usize>,
        file: &ShiftFile,
    ) -> Result<Self> {
        let s = Self {
            n: n.or(file.n).unwrap_or(20),
            ensembles: ensembles.or(file.ensembles).unwrap_or(10),
            architecture: architecture.or(file.architecture).unwrap_or(ArchName::Mini),
            bins: bins.or(file.bins).unwrap_or(20),
        };
        if s.ensembles < 2 {
            return Err(failure::validation(
                "shift analysis needs at least 2 ensemble members per task",
            ));
        }
        if s.n == 0 || s.bins == 0 {
            return Err(failure::validation("shift N and bins must be at least 1"));
        }
        Ok(s)
    }
}

/// Hyperparameters shared by every training cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainHyper {
    pub ensembles: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub inner_lr: Option<f64>,
    pub outer_lr: Option<f64>,
    pub inner_steps: Option<usize>,
    pub task_batch: Option<usize>,
    pub batch_size: Option<usize>,
    pub validation_fraction: f64,
}

impl TrainHyper {
    /// Defaults for the algorithm with the overrides applied.
    pub fn meta_config(
        &self,
        algorithm: Algorithm,
        architecture: ArchName,
        n: usize,
        seed: u64,
    ) -> MetaConfig {
        let mut c = MetaConfig::new(algorithm, architecture, n);
        c.seed = seed;
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut c.ensembles, self.ensembles);
        set(&mut c.max_epochs, self.max_epochs);
        set(&mut c.patience, self.patience);
        set(&mut c.inner_steps, self.inner_steps);
        set(&mut c.task_batch, self.task_batch);
        set(&mut c.batch_size, self.batch_size);
        if let Some(v) = self.inner_lr {
            c.inner_lr = v;
        }
        if let Some(v) = self.outer_lr {
            c.outer_lr = v;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSettings {
    pub algorithms: Vec<Algorithm>,
    pub architectures: Vec<ArchName>,
    pub n_values: Vec<usize>,
    pub samplings: Vec<Sampling>,
    pub seeds: Vec<u64>,
    pub hyper: TrainHyper,
}

/// Training flags as parsed, before merging.
#[derive(Debug, Clone, Default)]
pub struct TrainFlags {
    pub algorithms: Option<Vec<Algorithm>>,
    pub architectures: Option<Vec<ArchName>>,
    pub n_values: Option<Vec<usize>>,
    pub samplings: Option<Vec<Sampling>>,
    pub seeds: Option<Vec<u64>>,
    pub ensembles: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub inner_lr: Option<f64>,
    pub outer_lr: Option<f64>,
    pub inner_steps: Option<usize>,
    pub task_batch: Option<usize>,
    pub batch_size: Option<usize>,
    pub validation_fraction: Option<f64>,
}

impl TrainSettings {
    pub fn resolve(flags: TrainFlags, file: &TrainFile, global: &Global) -> Result<Self> {
        let f = file.clone();
        let s = Self {
            algorithms: flags
                .algorithms
                .or(f.algorithms)
                .unwrap_or_else(|| Algorithm::ALL.to_vec()),
            architectures: flags
                .architectures
                .or(f.architectures)
                .unwrap_or_else(|| vec![ArchName::Mini]),
            n_values: flags.n_values.or(f.n_values).unwrap_or_else(|| vec![5]),
            samplings: flags
                .samplings
                .or(f.samplings)
                .unwrap_or_else(|| vec![Sampling::Uniform]),
            seeds: flags.seeds.or(f.seeds).unwrap_or_else(|| vec![global.seed]),
            hyper: TrainHyper {
                ensembles: flags.ensembles.or(f.ensembles),
                max_epochs: flags.max_epochs.or(f.max_epochs),
                patience: flags.patience.or(f.patience),
                inner_lr: flags.inner_lr.or(f.inner_lr),
                outer_lr: flags.outer_lr.or(f.outer_lr),
                inner_steps: flags.inner_steps.or(f.inner_steps),
                task_batch: flags.task_batch.or(f.task_batch),
                batch_size: flags.batch_size.or(f.batch_size),
                validation_fraction: flags
                    .validation_fraction
                    .or(f.validation_fraction)
                    .unwrap_or(0.2),
            },
        };
        let empty = [
            ("algorithms", s.algorithms.is_empty()),
            ("architectures", s.architectures.is_empty()),
            ("N values", s.n_values.is_empty()),
            ("samplings", s.samplings.is_empty()),
            ("seeds", s.seeds.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|e| e.1) {
            return Err(failure::validation(format!(
                "the training grid has no {name}"
            )));
        }
        if !(s.hyper.validation_fraction > 0.0 && s.hyper.validation_fraction < 1.0) {
            return Err(failure::validation(
                "validation fraction must lie in (0, 1)",
            ));
        }
        for &alg in &s.algorithms {
            s.hyper
                .meta_config(alg, ArchName::Mini, 1, 0)
                .validate()
                .map_err(|e| failure::validation(e.to_string()))?;
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSettings {
    pub k_values: Vec<usize>,
}

impl EvalSettings {
    pub fn resolve(k_values: Option<Vec<usize>>, file: &EvalFile) -> Result<Self> {
        let k_values = k_values
            .or_else(|| file.k_values.clone())
            .unwrap_or_else(|| DEFAULT_K_VALUES.to_vec());
        if k_values.is_empty() || k_values.contains(&0) {
            return Err(failure::validation(
                "K values must be a non-empty list of positive integers",
            ));
        }
        Ok(Self { k_values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file: FileConfig = toml::from_str(
            r#"
            seed = 7
            out = "from-file"
            [generate]
            tasks = "full"
            reps = 30
            [train]
            algorithms = ["reptile", "tdl"]
            max_epochs = 12
            "#,
        )
        .unwrap();
        let g = Global::resolve(Some(3), None, None, &file).unwrap();
        assert_eq!((g.seed, g.out.to_str().unwrap()), (3, "from-file"));
        let gen = GenerateSettings::resolve(
            Some(TaskChoice::Mini),
            None,
            None,
            None,
            None,
            &file.generate,
        );
        assert_eq!((gen.tasks, gen.reps), (TaskChoice::Mini, 30));
        // 3N + 1 <= 30 admits N = 5 only.
        assert_eq!(gen.n_values, vec![5]);
        let flags = TrainFlags {
            max_epochs: Some(4),
            ..Default::default()
        };
        let t = TrainSettings::resolve(flags, &file.train, &g).unwrap();
        assert_eq!(t.algorithms, vec![Algorithm::Reptile, Algorithm::Tdl]);
        assert_eq!(t.hyper.max_epochs, Some(4));
        assert_eq!(t.seeds, vec![3]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(toml::from_str::<FileConfig>("bogus = 1").is_err());
        assert!(EvalSettings::resolve(Some(vec![0]), &EvalFile::default()).is_err());
        assert!(ShiftSettings::resolve(None, Some(1), None, None, &ShiftFile::default()).is_err());
        let g = Global::resolve(None, None, Some("x".into()), &FileConfig::default()).unwrap();
        let flags = TrainFlags {
            validation_fraction: Some(1.5),
            ..Default::default()
        };
        assert!(TrainSettings::resolve(flags, &TrainFile::default(), &g).is_err());
    }
}
