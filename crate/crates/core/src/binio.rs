//! Little-endian binary helpers shared by the checkpoint and task formats.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (this build reads version {expected})")]
    Version { expected: u16, found: u16 },
    #[error("truncated input: needed {needed} more bytes at offset {offset}, only {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vals: &[f32]) {
        self.buf.reserve(vals.len() * 4);
        for v in vals {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.data.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - available,
                available,
            });
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let raw = self.take(4)?;
        let found = [raw[0], raw[1], raw[2], raw[3]];
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u16) -> Result<(), FormatError> {
        let found = self.u16()?;
        if found != expected {
            return Err(FormatError::Version { expected, found });
        }
        Ok(())
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        self.take(n)
    }

    pub fn u16(&mut self) -> Result<u16, FormatError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| FormatError::Invalid(format!("element count {n} overflows")))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn finish(&self) -> Result<(), FormatError> {
        let rest = self.data.len() - self.pos;
        if rest != 0 {
            return Err(FormatError::Invalid(format!("{rest} trailing bytes")));
        }
        Ok(())
    }
}

/// Writes via a sibling temp file and a rename, so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
