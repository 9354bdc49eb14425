//! Dense 1-D and 2-D tensors over f64.
//!
//! Shapes are fixed at construction; constructors reject non-finite entries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// A 1-D tensor (vector).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor1 {
    data: Vec<f64>,
}

impl Tensor1 {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite entry in Tensor1".into()));
        }
        Ok(Tensor1 { data })
    }

    pub fn zeros(n: usize) -> Self {
        Tensor1 { data: vec![0.0; n] }
    }

    pub fn from_fn(n: usize, f: impl FnMut(usize) -> f64) -> Self {
        Tensor1 {
            data: (0..n).map(f).collect(),
        }
    }

    pub fn gaussian(n: usize, std: f64, rng: &mut Rng) -> Self {
        Tensor1 {
            data: (0..n).map(|_| rng.normal() * std).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn norm(&self) -> f64 {
        super::ops::dot(&self.data, &self.data).sqrt()
    }

    pub fn assert_finite(&self) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite entry in Tensor1".into()));
        }
        Ok(())
    }
}

/// A 2-D tensor (matrix), row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "Tensor2 {}x{} needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite entry in Tensor2".into()));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        Tensor2 {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.normal() * std).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn assert_finite(&self) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite entry in Tensor2".into()));
        }
        Ok(())
    }
}
