//! Parameter checkpoints.
//!
//! Layout (little-endian): magic `MSNN`, `u16` version, `u32` length +
//! UTF-8 architecture name, then for every layer in spec order the weight
//! array followed by the bias array, each as a `u32` element count and that
//! many `f32` values.

use std::fs;
use std::path::Path;

use super::{ArchName, LayerParams, NnError, ParameterSet, Result};
use crate::binio::{self, FormatError, Reader, Writer};

const MAGIC: [u8; 4] = *b"MSNN";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint(name: ArchName, params: &ParameterSet<f32>) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&MAGIC);
    w.u16(CHECKPOINT_VERSION);
    let name = name.as_str().as_bytes();
    w.u32(name.len() as u32);
    w.bytes(name);
    for layer in &params.layers {
        for arr in [&layer.weight, &layer.bias] {
            w.u32(arr.len() as u32);
            w.f32s(arr);
        }
    }
    w.into_inner()
}

/// Decodes a checkpoint and checks its shapes against the named
/// architecture's standard layout.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ArchName, ParameterSet<f32>)> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let len = r.u32()? as usize;
    let raw = r.bytes(len)?;
    let name: ArchName = std::str::from_utf8(raw)
        .map_err(|_| FormatError::Invalid("architecture name is not UTF-8".into()))?
        .parse()?;
    let spec = super::ArchitectureSpec::build(name);
    let mut layers = Vec::with_capacity(spec.num_layers());
    for (i, (wl, bl, _)) in spec.layer_shapes().into_iter().enumerate() {
        let mut read = |expected: usize, what: &str| -> Result<Vec<f32>> {
            let n = r.u32()? as usize;
            if n != expected {
                return Err(NnError::Dimension {
                    layer: format!("checkpoint layer {i} {what}"),
                    expected,
                    got: n,
                });
            }
            Ok(r.f32s(n)?)
        };
        let weight = read(wl, "weight")?;
        let bias = read(bl, "bias")?;
        layers.push(LayerParams { weight, bias });
    }
    r.finish()?;
    Ok((name, ParameterSet { layers }))
}

pub fn save_checkpoint(path: &Path, name: ArchName, params: &ParameterSet<f32>) -> Result<()> {
    binio::write_atomic(path, &encode_checkpoint(name, params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ArchName, ParameterSet<f32>)> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ArchitectureSpec};

    #[test]
    fn round_trip_is_exact() {
        for name in [ArchName::Mini, ArchName::Big] {
            let p = init_params(&ArchitectureSpec::build(name), 21);
            let bytes = encode_checkpoint(name, &p);
            assert_eq!(&bytes[..4], b"MSNN");
            assert_eq!(decode_checkpoint(&bytes).unwrap(), (name, p));
        }
    }

    #[test]
    fn header_errors() {
        let p = init_params(&ArchitectureSpec::build(ArchName::Mini), 1);
        let mut bytes = encode_checkpoint(ArchName::Mini, &p);
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            decode_checkpoint(truncated),
            Err(NnError::Format(FormatError::Truncated { needed: 3, .. }))
        ));
        bytes[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(NnError::Format(FormatError::Version { found: 9, .. }))
        ));
        bytes[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(NnError::Format(FormatError::BadMagic { .. }))
        ));
    }
}
