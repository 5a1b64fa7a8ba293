use serde::{Deserialize, Serialize};

use super::kernels;
use crate::error::{Result, VtiError};

/// Dense row-major `f32` array. Construction rejects shape/length mismatches
/// and non-finite values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(VtiError::dim(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(VtiError::NonFinite { index });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Build from a nested row list; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(VtiError::dim("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f32 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    /// Contiguous sub-slice selected by fixing the leading indices.
    pub fn slice(&self, leading: &[usize]) -> &[f32] {
        assert!(leading.len() <= self.shape.len());
        let inner: usize = self.shape[leading.len()..].iter().product();
        let mut flat = 0;
        for (&i, &d) in leading.iter().zip(&self.shape) {
            assert!(i < d, "index {leading:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        &self.data[flat * inner..(flat + 1) * inner]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(VtiError::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Used internally where values are known finite by construction.
    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (&[m, k], &[k2, n]) = (self.shape.as_slice(), other.shape.as_slice()) else {
            return Err(VtiError::dim(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape, other.shape
            )));
        };
        if k != k2 {
            return Err(VtiError::dim(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let data = kernels::matmul(&self.data, &other.data, m, k, n);
        Tensor::new(vec![m, n], data)
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(VtiError::dim(format!(
                "axis {axis} out of range for {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = self.data.clone();
        let mut buf = vec![0.0f32; n];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = self.data[base + j * inner];
                }
                kernels::softmax_in_place(&mut buf);
                for (j, &b) in buf.iter().enumerate() {
                    out[base + j * inner] = b;
                }
            }
        }
        Ok(Tensor::from_parts_unchecked(self.shape.clone(), out))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
        let d = *self
            .shape
            .last()
            .ok_or_else(|| VtiError::dim("layer_norm on a scalar"))?;
        if d == 0 || gain.shape() != [d] || bias.shape() != [d] {
            return Err(VtiError::dim(format!(
                "layer_norm over {:?} with gain {:?} and bias {:?}",
                self.shape,
                gain.shape(),
                bias.shape()
            )));
        }
        if eps <= 0.0 {
            return Err(VtiError::dim("layer_norm eps must be positive"));
        }
        let (out, _, _) = kernels::layer_norm_rows(&self.data, &gain.data, &bias.data, eps);
        Tensor::new(self.shape.clone(), out)
    }
}
