use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::{ArchitectureSpec, NnError, Result, Scalar};
use crate::seed;

/// Weights of one layer. Conv weights are laid out `[out][in][kernel]`,
/// linear weights `[out][in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// All trainable values of a network, convolution layers first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet<T = f32> {
    pub layers: Vec<LayerParams<T>>,
}

/// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
pub fn init_params(spec: &ArchitectureSpec, seed: u64) -> ParameterSet<f32> {
    let mut rng = seed::rng(seed);
    let layers = spec
        .layer_shapes()
        .into_iter()
        .map(|(w, b, fan_in)| {
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let dist = Uniform::new_inclusive(-bound, bound).expect("positive bound");
            LayerParams {
                weight: (0..w).map(|_| dist.sample(&mut rng)).collect(),
                bias: vec![0.0; b],
            }
        })
        .collect();
    ParameterSet { layers }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn zeros(spec: &ArchitectureSpec) -> Self {
        Self {
            layers: spec
                .layer_shapes()
                .into_iter()
                .map(|(w, b, _)| LayerParams {
                    weight: vec![T::zero(); w],
                    bias: vec![T::zero(); b],
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: vec![T::zero(); l.weight.len()],
                    bias: vec![T::zero(); l.bias.len()],
                })
                .collect(),
        }
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.len() == b.weight.len() && a.bias.len() == b.bias.len())
    }

    pub fn check_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(NnError::Dimension {
                layer: what.to_string(),
                expected: self.layers.len(),
                got: other.layers.len(),
            });
        }
        for (i, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a.weight.len() != b.weight.len() || a.bias.len() != b.bias.len() {
                return Err(NnError::Dimension {
                    layer: format!("{what} layer {i}"),
                    expected: a.weight.len() + a.bias.len(),
                    got: b.weight.len() + b.bias.len(),
                });
            }
        }
        Ok(())
    }

    /// Whether the shapes match what `spec` prescribes.
    pub fn matches(&self, spec: &ArchitectureSpec) -> bool {
        let shapes = spec.layer_shapes();
        shapes.len() == self.layers.len()
            && shapes
                .iter()
                .zip(&self.layers)
                .all(|(&(w, b, _), l)| l.weight.len() == w && l.bias.len() == b)
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.values_mut().zip(other.values()) {
            *a = *a + scale * b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in self.values_mut() {
            *v = *v * s;
        }
    }

    /// `self - other`, elementwise.
    pub fn difference(&self, other: &Self) -> Self {
        debug_assert!(self.same_shape(other));
        let mut out = self.clone();
        for (a, &b) in out.values_mut().zip(other.values()) {
            *a = *a - b;
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        let conv = |v: &[T]| {
            v.iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap())
                .collect()
        };
        ParameterSet {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: conv(&l.weight),
                    bias: conv(&l.bias),
                })
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values()
            .zip(other.values())
            .map(|(a, b)| (*a - *b).abs().to_f64().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchName;

    #[test]
    fn init_is_deterministic() {
        let spec = ArchitectureSpec::build(ArchName::Small);
        assert_eq!(init_params(&spec, 11), init_params(&spec, 11));
    }

    #[test]
    fn seeds_differ() {
        let spec = ArchitectureSpec::build(ArchName::Mini);
        let a = init_params(&spec, 1);
        let b = init_params(&spec, 2);
        assert!(a.values().zip(b.values()).any(|(x, y)| x != y));
    }

    #[test]
    fn mini_shapes_and_bounds() {
        let spec = ArchitectureSpec::build(ArchName::Mini);
        let p = init_params(&spec, 5);
        assert!(p.matches(&spec));
        assert_eq!(p.len(), spec.count_params());
        assert_eq!(p.layers[0].weight.len(), 4 * 2 * 3);
        assert_eq!(p.layers[1].weight.len(), 8 * 4 * 3);
        for (layer, (_, _, fan_in)) in p.layers.iter().zip(spec.layer_shapes()) {
            let bound = (6.0 / fan_in as f32).sqrt();
            assert!(layer.weight.iter().all(|w| w.abs() <= bound));
            assert!(layer.bias.iter().all(|&b| b == 0.0));
        }
        assert!(p.all_finite());
    }
}
