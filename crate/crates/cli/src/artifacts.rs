//! On-disk layout, config hashes and atomic text output.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use metashift_core::binio::write_atomic;

pub const DONE: &str = "DONE";

/// First 16 hex digits of the SHA-256 of `value`'s JSON encoding.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("settings serialize");
    hex(&Sha256::digest(&bytes))[..16].to_string()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn header(hash: &str) -> String {
    format!("# config_hash: {hash}\n")
}

/// Writes `# config_hash` plus `body`, atomically.
pub fn write_text(path: &Path, hash: &str, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut s = header(hash);
    s.push_str(body);
    write_atomic(path, s.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

/// SVG files carry the hash in an XML comment.
pub fn write_svg(path: &Path, hash: &str, svg: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let s = format!("<!-- config_hash: {hash} -->\n{svg}");
    write_atomic(path, s.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

/// The hash recorded in the first line of a text artifact, if any.
pub fn recorded_hash(path: &Path) -> Option<String> {
    let text = fs::read_to_string(path).ok()?;
    let line = text.lines().next()?;
    line.strip_prefix("# config_hash: ")
        .or_else(|| {
            line.strip_prefix("<!-- config_hash: ")
                .and_then(|l| l.strip_suffix(" -->"))
        })
        .map(str::to_string)
}

/// Whether `dir` holds a completion marker written with `hash`.
pub fn is_done(dir: &Path, hash: &str) -> bool {
    recorded_hash(&dir.join(DONE)).as_deref() == Some(hash)
}

pub fn mark_done(dir: &Path, hash: &str) -> Result<()> {
    write_text(&dir.join(DONE), hash, "")
}

/// Text of a CSV artifact without its comment lines.
pub fn read_csv_body(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect())
}

/// Paths below the output root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn tasks(&self) -> PathBuf {
        self.root.join("tasks")
    }

    pub fn ood_tasks(&self) -> PathBuf {
        self.root.join("tasks-ood")
    }

    pub fn shift(&self) -> PathBuf {
        self.root.join("shift")
    }

    pub fn shift_models(&self) -> PathBuf {
        self.shift().join("models")
    }

    pub fn task_model(&self, task: usize, member: usize) -> PathBuf {
        self.shift_models()
            .join(format!("task_{task:03}"))
            .join(format!("member_{member:02}.ckpt"))
    }

    pub fn shift_state(&self) -> PathBuf {
        self.shift().join("shift.json")
    }

    pub fn train(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn eval(&self, ood: bool) -> PathBuf {
        self.root.join(if ood { "eval-ood" } else { "eval" })
    }

    pub fn results(&self, ood: bool) -> PathBuf {
        self.eval(ood).join("results.csv")
    }

    pub fn report(&self, ood: bool) -> PathBuf {
        self.root.join(if ood { "report-ood" } else { "report" })
    }
}
