//! The `metashift` command line: task generation, shift analysis,
//! training grids, fine-tuning evaluation and reports, all persisted under
//! one output directory.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod failure;
pub mod plot;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use metashift_core::meta::{Algorithm, Sampling};
use metashift_core::nn::ArchName;

use config::{
    EvalSettings, FileConfig, GenerateSettings, Global, ShiftSettings, TaskChoice, TrainFlags,
    TrainSettings,
};

#[derive(Debug, Parser)]
#[command(
    name = "metashift",
    version,
    about = "Meta-learning under task shift on synthetic seismic tasks"
)]
pub struct Cli {
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output root [default: $METASHIFT_OUT or ./metashift-out].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// TOML file with the same settings as the flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and partition a task archive.
    Generate(GenerateArgs),
    /// Cross-task accuracy, similarity, clustering and splits.
    Shift(ShiftArgs),
    /// Train a grid of models (or the task-specific models for `shift`).
    Train(TrainArgs),
    /// Fine-tune trained models on held-out tasks and record accuracies.
    Eval(EvalArgs),
    /// Aggregate results into tables and plots.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Task design to generate.
    #[arg(long, value_enum)]
    pub tasks: Option<TaskChoice>,
    /// Waveforms per class and task.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Samples per component.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Training amounts N to partition for.
    #[arg(long, value_delimiter = ',')]
    pub n_values: Option<Vec<usize>>,
    /// SNR bins of the out-of-distribution set.
    #[arg(long)]
    pub ood_bins: Option<usize>,
    /// Replace an existing archive.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Default)]
pub struct ShiftFlags {
    /// Training amount of the task-specific models.
    #[arg(long = "shift-n", id = "shift_n")]
    pub n: Option<usize>,
    /// Task-specific models per task.
    #[arg(long = "shift-ensembles", id = "shift_ensembles")]
    pub ensembles: Option<usize>,
    /// Architecture of the task-specific models.
    #[arg(long = "shift-arch", id = "shift_arch")]
    pub architecture: Option<ArchName>,
    /// Bins of the similarity-versus-accuracy table.
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ShiftArgs {
    #[command(flatten)]
    pub shift: ShiftFlags,
    #[command(flatten)]
    pub train: GridArgs,
}

#[derive(Debug, Args, Default)]
pub struct GridArgs {
    /// Algorithms to train or evaluate.
    #[arg(long, value_delimiter = ',')]
    pub algorithms: Option<Vec<Algorithm>>,
    /// Network sizes.
    #[arg(long, value_delimiter = ',')]
    pub architectures: Option<Vec<ArchName>>,
    /// Training amounts N.
    #[arg(long = "n", value_delimiter = ',')]
    pub n_values: Option<Vec<usize>>,
    /// Ways of choosing the training tasks.
    #[arg(long, value_delimiter = ',')]
    pub samplings: Option<Vec<Sampling>>,
    /// Training seeds [default: the master seed].
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Ensemble members per configuration.
    #[arg(long)]
    pub ensembles: Option<usize>,
    /// Epoch cap.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Inner-loop (and fine-tuning) learning rate.
    #[arg(long)]
    pub inner_lr: Option<f64>,
    /// Outer-loop learning rate.
    #[arg(long)]
    pub outer_lr: Option<f64>,
    /// Inner-loop steps per episode.
    #[arg(long)]
    pub inner_steps: Option<usize>,
    /// Tasks per meta-batch.
    #[arg(long)]
    pub task_batch: Option<usize>,
    /// Mini-batch size of the pooled and task-specific trainers.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Fraction of the pool held out for validation.
    #[arg(long)]
    pub validation_fraction: Option<f64>,
}

impl GridArgs {
    fn flags(self) -> TrainFlags {
        TrainFlags {
            algorithms: self.algorithms,
            architectures: self.architectures,
            n_values: self.n_values,
            samplings: self.samplings,
            seeds: self.seeds,
            ensembles: self.ensembles,
            max_epochs: self.max_epochs,
            patience: self.patience,
            inner_lr: self.inner_lr,
            outer_lr: self.outer_lr,
            inner_steps: self.inner_steps,
            task_batch: self.task_batch,
            batch_size: self.batch_size,
            validation_fraction: self.validation_fraction,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Train D&C-style models on every task for `shift` instead of the grid.
    #[arg(long)]
    pub task_specific: bool,
    #[command(flatten)]
    pub shift: ShiftFlags,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Fine-tuning shots K.
    #[arg(long = "k", value_delimiter = ',')]
    pub k_values: Option<Vec<usize>>,
    /// Score on the out-of-distribution archive.
    #[arg(long)]
    pub ood: bool,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report on the out-of-distribution results.
    #[arg(long)]
    pub ood: bool,
}

fn shift_settings(f: ShiftFlags, file: &FileConfig) -> Result<ShiftSettings> {
    ShiftSettings::resolve(f.n, f.ensembles, f.architecture, f.bins, &file.shift)
}

fn dispatch(cmd: Command, global: &Global, file: &FileConfig) -> Result<()> {
    match cmd {
        Command::Generate(a) => {
            let s = GenerateSettings::resolve(
                a.tasks,
                a.reps,
                a.samples,
                a.n_values,
                a.ood_bins,
                &file.generate,
            );
            commands::generate::run(global, &s, a.force)
        }
        Command::Shift(a) => {
            let s = shift_settings(a.shift, file)?;
            let t = TrainSettings::resolve(a.train.flags(), &file.train, global)?;
            commands::shift::run(global, &s, &t.hyper)
        }
        Command::Train(a) => {
            let t = TrainSettings::resolve(a.grid.flags(), &file.train, global)?;
            if a.task_specific {
                let s = shift_settings(a.shift, file)?;
                commands::shift::train_task_models(global, &s, &t.hyper)
            } else {
                commands::train::run(global, &t)
            }
        }
        Command::Eval(a) => {
            let t = TrainSettings::resolve(a.grid.flags(), &file.train, global)?;
            let e = EvalSettings::resolve(a.k_values, &file.eval)?;
            commands::eval::run(global, &t, &e, a.ood)
        }
        Command::Report(a) => commands::report::run(global, a.ood),
    }
}

/// Runs one subcommand inside a thread pool sized by `--jobs`.
pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let global = Global::resolve(cli.seed, cli.jobs, cli.out, &file)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = global.jobs {
        pool = pool.num_threads(j);
    }
    let pool = pool.build().context("starting the worker pool")?;
    pool.install(|| dispatch(cli.command, &global, &file))
}
