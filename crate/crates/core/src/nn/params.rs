use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named parameter tensor, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                values.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            shape,
            values,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Layer name and shape, without the values. Used to rebuild parameter
/// vectors from flat or sparse encodings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl LayerInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A model's trainable parameters as an ordered list of named tensors.
///
/// Binary operations require both operands to be aligned: same layer names
/// and shapes, pairwise, in the same order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    layers: Vec<Tensor>,
}

impl ParamVector {
    pub fn new(layers: Vec<Tensor>) -> Self {
        Self { layers }
    }

    /// Single-layer vector, handy for pruning and aggregation on raw data.
    pub fn from_flat(values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            layers: vec![Tensor {
                name: "flat".into(),
                shape: vec![n],
                values,
            }],
        }
    }

    /// Rebuild a vector with the layout of `directory` from flat values.
    pub fn from_directory(directory: &[LayerInfo], flat: &[f64]) -> Result<Self> {
        let total: usize = directory.iter().map(LayerInfo::len).sum();
        if total != flat.len() {
            return Err(Error::DimensionMismatch(format!(
                "directory holds {} scalars, got {}",
                total,
                flat.len()
            )));
        }
        let mut offset = 0;
        let layers = directory
            .iter()
            .map(|info| {
                let n = info.len();
                let t = Tensor {
                    name: info.name.clone(),
                    shape: info.shape.clone(),
                    values: flat[offset..offset + n].to_vec(),
                };
                offset += n;
                t
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Tensor] {
        &mut self.layers
    }

    pub fn directory(&self) -> Vec<LayerInfo> {
        self.layers
            .iter()
            .map(|t| LayerInfo {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect()
    }

    pub fn total_len(&self) -> usize {
        self.layers.iter().map(Tensor::len).sum()
    }

    /// Scalars flattened in layer order.
    pub fn iter(&self) -> impl Iterator<Item = &f64> + '_ {
        self.layers.iter().flat_map(|t| t.values.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers.iter_mut().flat_map(|t| t.values.iter_mut())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn is_aligned(&self, other: &ParamVector) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn check_aligned(&self, other: &ParamVector) -> Result<()> {
        if self.is_aligned(other) {
            Ok(())
        } else {
            Err(Error::Misaligned(format!(
                "{:?} vs {:?}",
                self.directory(),
                other.directory()
            )))
        }
    }

    /// Elementwise combination of two aligned vectors.
    pub fn zip_map(&self, other: &ParamVector, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_aligned(other)?;
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| Tensor {
                name: a.name.clone(),
                shape: a.shape.clone(),
                values: a
                    .values
                    .iter()
                    .zip(&b.values)
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|t| Tensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                values: t.values.iter().map(|&x| f(x)).collect(),
            })
            .collect();
        Self { layers }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamVector, scale: f64) -> Result<()> {
        self.check_aligned(other)?;
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn bitwise_eq(&self, other: &ParamVector) -> bool {
        self.is_aligned(other)
            && self
                .iter()
                .zip(other.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn count_nonzero(&self) -> usize {
        self.iter().filter(|v| **v != 0.0).count()
    }
}
