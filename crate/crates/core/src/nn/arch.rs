use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{NnError, Result};

/// Number of input components per waveform.
pub const INPUT_CHANNELS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchName {
    Mini,
    Small,
    Big,
    Huge,
}

impl ArchName {
    pub const ALL: [ArchName; 4] = [
        ArchName::Mini,
        ArchName::Small,
        ArchName::Big,
        ArchName::Huge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchName::Mini => "mini",
            ArchName::Small => "small",
            ArchName::Big => "big",
            ArchName::Huge => "huge",
        }
    }
}

impl fmt::Display for ArchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchName {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini" => Ok(ArchName::Mini),
            "small" => Ok(ArchName::Small),
            "big" => Ok(ArchName::Big),
            "huge" => Ok(ArchName::Huge),
            other => Err(NnError::Architecture(format!(
                "unknown architecture {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearSpec {
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Layer layout of a classifier.
///
/// Convolutions use stride 1 with zero "same" padding, so only the 2/2
/// max-pools listed in `pool_after` shorten the sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: ArchName,
    pub conv_layers: Vec<ConvSpec>,
    pub pool_after: BTreeSet<usize>,
    pub mlp_layers: Vec<LinearSpec>,
}

fn conv_stack(channels: &[usize], kernel: usize) -> Vec<ConvSpec> {
    let mut prev = INPUT_CHANNELS;
    channels
        .iter()
        .map(|&c| {
            let spec = ConvSpec {
                in_channels: prev,
                out_channels: c,
                kernel,
            };
            prev = c;
            spec
        })
        .collect()
}

fn mlp_stack(input: usize, widths: &[usize]) -> Vec<LinearSpec> {
    let mut prev = input;
    let mut out: Vec<LinearSpec> = widths
        .iter()
        .map(|&w| {
            let spec = LinearSpec {
                in_dim: prev,
                out_dim: w,
            };
            prev = w;
            spec
        })
        .collect();
    out.push(LinearSpec {
        in_dim: prev,
        out_dim: 1,
    });
    out
}

impl ArchitectureSpec {
    /// The four standard sizes.
    pub fn build(name: ArchName) -> Self {
        let (channels, kernel, pools, widths): (&[usize], usize, &[usize], &[usize]) = match name {
            ArchName::Mini => (&[4, 8], 3, &[1], &[8, 16]),
            ArchName::Small => (&[16, 32], 3, &[1], &[32, 64]),
            ArchName::Big => (&[16, 32, 64], 3, &[2], &[64, 128, 64]),
            ArchName::Huge => (&[32, 64, 128, 192], 5, &[1, 3], &[192, 384, 192]),
        };
        let conv_layers = conv_stack(channels, kernel);
        let feature = *channels.last().expect("non-empty conv stack");
        Self {
            name,
            conv_layers,
            pool_after: pools.iter().copied().collect(),
            mlp_layers: mlp_stack(feature, widths),
        }
    }

    /// A validated non-standard layout (used for toy networks in tests and
    /// diagnostics). `conv_layers` may be empty, in which case the global
    /// average pool acts directly on the input components.
    pub fn custom(
        name: ArchName,
        conv_layers: Vec<ConvSpec>,
        pool_after: BTreeSet<usize>,
        mlp_layers: Vec<LinearSpec>,
    ) -> Result<Self> {
        let spec = Self {
            name,
            conv_layers,
            pool_after,
            mlp_layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::Architecture(m));
        let mut prev = INPUT_CHANNELS;
        for (i, c) in self.conv_layers.iter().enumerate() {
            if c.in_channels != prev {
                return bad(format!(
                    "conv{i} expects {} channels, previous layer gives {prev}",
                    c.in_channels
                ));
            }
            if c.out_channels == 0 || c.kernel == 0 || c.kernel % 2 == 0 {
                return bad(format!("conv{i} needs positive channels and an odd kernel"));
            }
            prev = c.out_channels;
        }
        if let Some(&p) = self
            .pool_after
            .iter()
            .find(|&&p| p >= self.conv_layers.len())
        {
            return bad(format!("pool after conv{p}, which does not exist"));
        }
        if self.mlp_layers.is_empty() {
            return bad("at least one linear layer is required".into());
        }
        for (i, l) in self.mlp_layers.iter().enumerate() {
            if l.in_dim != prev || l.out_dim == 0 {
                return bad(format!(
                    "linear{i} expects {} inputs, previous layer gives {prev}",
                    l.in_dim
                ));
            }
            prev = l.out_dim;
        }
        if prev != 1 {
            return bad(format!("final output dimension is {prev}, expected 1"));
        }
        Ok(())
    }

    /// Width of the pooled feature vector fed to the MLP.
    pub fn feature_dim(&self) -> usize {
        self.conv_layers
            .last()
            .map_or(INPUT_CHANNELS, |c| c.out_channels)
    }

    pub fn num_layers(&self) -> usize {
        self.conv_layers.len() + self.mlp_layers.len()
    }

    /// (weight length, bias length, fan-in) per layer, convolutions first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let conv = self.conv_layers.iter().map(|c| {
            (
                c.out_channels * c.in_channels * c.kernel,
                c.out_channels,
                c.in_channels * c.kernel,
            )
        });
        let mlp = self
            .mlp_layers
            .iter()
            .map(|l| (l.out_dim * l.in_dim, l.out_dim, l.in_dim));
        conv.chain(mlp).collect()
    }

    pub fn count_params(&self) -> usize {
        self.layer_shapes().iter().map(|(w, b, _)| w + b).sum()
    }

    /// Sequence length after the conv stack for an input of `samples`.
    pub fn output_len(&self, samples: usize) -> usize {
        (0..self.conv_layers.len()).fold(samples, |len, i| {
            if self.pool_after.contains(&i) {
                len / 2
            } else {
                len
            }
        })
    }
}
