//! On-disk task archive: a directory holding `manifest.json` and one
//! binary file per task.
//!
//! Task file layout (little-endian): magic `STSK`, `u16` version, `u32`
//! waveform count, `u32` channels, `u32` samples, one `u8` label per
//! waveform, then `f32` data in waveform-major, channel-major, sample-minor
//! order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    FactorLevels, GenerationConfig, Partitions, Result, Task, TaskSet, TaskgenError, CHANNELS,
};
use crate::binio::{self, FormatError, Reader, Writer};
use crate::shift::SplitAssignment;

pub const ARCHIVE_VERSION: u16 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const MAGIC: [u8; 4] = *b"STSK";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u16,
    config: GenerationConfig,
    tasks: Vec<TaskEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    splits: Option<SplitAssignment>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TaskEntry {
    id: usize,
    file: String,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    factors: Option<FactorLevels>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    snr_range: Option<(f64, f64)>,
    n_waveforms: usize,
    samples: usize,
    partitions: BTreeMap<usize, Partitions>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TaskgenError + '_ {
    move |source| TaskgenError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn encode_task(task: &Task) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&MAGIC);
    w.u16(ARCHIVE_VERSION);
    w.u32(task.len() as u32);
    w.u32(CHANNELS as u32);
    w.u32(task.samples as u32);
    w.bytes(&task.labels);
    w.f32s(&task.data);
    w.into_inner()
}

fn decode_task(bytes: &[u8]) -> std::result::Result<(usize, Vec<u8>, Vec<f32>), FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    r.version(ARCHIVE_VERSION)?;
    let n = r.u32()? as usize;
    let channels = r.u32()? as usize;
    if channels != CHANNELS {
        return Err(FormatError::Invalid(format!(
            "expected {CHANNELS} channels, found {channels}"
        )));
    }
    let samples = r.u32()? as usize;
    let labels = r.bytes(n)?.to_vec();
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(FormatError::Invalid(format!(
            "label {bad} outside {{0, 1}}"
        )));
    }
    let data = r.f32s(n * channels * samples)?;
    r.finish()?;
    Ok((samples, labels, data))
}

/// Writes the archive into `dir`, creating it if needed. Files are written
/// atomically, the manifest last.
pub fn save_archive(set: &TaskSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(set.tasks.len());
    for task in &set.tasks {
        let file = format!("task_{:04}.bin", task.id);
        let path = dir.join(&file);
        binio::write_atomic(&path, &encode_task(task)).map_err(io_err(&path))?;
        entries.push(TaskEntry {
            id: task.id,
            file,
            seed: task.seed,
            factors: task.factors,
            snr_range: task.snr_range,
            n_waveforms: task.len(),
            samples: task.samples,
            partitions: task.partitions.clone(),
        });
    }
    let manifest = Manifest {
        format_version: ARCHIVE_VERSION,
        config: set.config.clone(),
        tasks: entries,
        splits: set.splits.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest).map_err(|source| TaskgenError::Json {
        path: path.clone(),
        source,
    })?;
    binio::write_atomic(&path, &json).map_err(io_err(&path))
}

pub fn load_archive(dir: &Path) -> Result<TaskSet> {
    let mpath = dir.join(MANIFEST_FILE);
    let raw = fs::read(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|source| TaskgenError::Json {
        path: mpath.clone(),
        source,
    })?;
    if manifest.format_version != ARCHIVE_VERSION {
        return Err(TaskgenError::Format {
            path: mpath,
            source: FormatError::Version {
                expected: ARCHIVE_VERSION,
                found: manifest.format_version,
            },
        });
    }
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for e in manifest.tasks {
        let path: PathBuf = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let fmt = |source| TaskgenError::Format {
            path: path.clone(),
            source,
        };
        let (samples, labels, data) = decode_task(&bytes).map_err(fmt)?;
        if samples != e.samples || labels.len() != e.n_waveforms {
            return Err(fmt(FormatError::Invalid(format!(
                "manifest says {} waveforms of {} samples, file holds {} of {}",
                e.n_waveforms,
                e.samples,
                labels.len(),
                samples
            ))));
        }
        tasks.push(Task {
            id: e.id,
            seed: e.seed,
            factors: e.factors,
            snr_range: e.snr_range,
            samples,
            labels,
            data,
            partitions: e.partitions,
        });
    }
    Ok(TaskSet {
        config: manifest.config,
        tasks,
        splits: manifest.splits,
    })
}
