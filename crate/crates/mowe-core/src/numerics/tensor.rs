//! Dense row-major tensors, double precision.
//!
//! No broadcasting anywhere: every shape requirement is checked and violations
//! surface as errors naming both shapes.

use crate::error::{MoweError, Result};
use crate::numerics::rng::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(MoweError::invalid(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(MoweError::invalid("ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    /// I.i.d. normal entries scaled by `scale`.
    pub fn randn(shape: Vec<usize>, scale: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.normal() * scale).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-matrix {:?}", self.shape);
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix {:?}", self.shape);
        self.shape[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Columns [start, start+width) of a matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor> {
        let (r, c) = (self.rows(), self.cols());
        if start + width > c {
            return Err(MoweError::invalid(format!(
                "column slice {}..{} out of range for {} columns",
                start,
                start + width,
                c
            )));
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Tensor::new(vec![r, width], data)
    }

    /// Rows [start, start+count) of a matrix.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Tensor> {
        let (r, c) = (self.rows(), self.cols());
        if start + count > r {
            return Err(MoweError::invalid(format!(
                "row slice {}..{} out of range for {} rows",
                start,
                start + count,
                r
            )));
        }
        Tensor::new(
            vec![count, c],
            self.data[start * c..(start + count) * c].to_vec(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn approx_eq(&self, other: &Tensor, tol: f64) -> bool {
        self.shape == other.shape && self.max_abs_diff(other) <= tol
    }

    /// FNV-1a over shape and little-endian value bytes; bit-exact golden
    /// fingerprint for regression tests.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::with_capacity(8 * (self.shape.len() + self.data.len()));
        for &s in &self.shape {
            bytes.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for &v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        crate::numerics::rng::fnv1a(&bytes)
    }
}
