//! Named parameter storage with per-parameter Adam state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::{Tensor1, Tensor2};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamShape {
    Vector(usize),
    Matrix(usize, usize),
}

impl ParamShape {
    pub fn numel(&self) -> usize {
        match *self {
            ParamShape::Vector(n) => n,
            ParamShape::Matrix(r, c) => r * c,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    shape: ParamShape,
    value: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    step: u64,
}

/// Named parameter tensors plus their optimizer state.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

/// Dense gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Gradients::default()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.map.get(name).map(|v| v.as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.map.get_mut(name).map(|v| v.as_mut_slice())
    }

    pub fn insert(&mut self, name: &str, grad: Vec<f64>) {
        self.map.insert(name.to_string(), grad);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.map.values_mut() {
            for x in v.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn zero(&mut self) {
        for v in self.map.values_mut() {
            v.fill(0.0);
        }
    }

    pub fn assert_finite(&self) -> Result<()> {
        for (name, v) in &self.map {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
        }
        Ok(())
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    fn insert_raw(&mut self, name: &str, shape: ParamShape, value: Vec<f64>) {
        let n = value.len();
        debug_assert_eq!(shape.numel(), n);
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                shape,
                value,
                adam_m: vec![0.0; n],
                adam_v: vec![0.0; n],
                step: 0,
            },
        );
    }

    pub fn insert_vector(&mut self, name: &str, t: Tensor1) {
        let n = t.len();
        self.insert_raw(name, ParamShape::Vector(n), t.into_vec());
    }

    pub fn insert_matrix(&mut self, name: &str, t: Tensor2) {
        let shape = ParamShape::Matrix(t.rows(), t.cols());
        let data = t.data().to_vec();
        self.insert_raw(name, shape, data);
    }

    pub fn shape(&self, name: &str) -> Option<ParamShape> {
        self.entries.get(name).map(|e| e.shape)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn raw(&self, name: &str) -> &[f64] {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn raw_mut(&mut self, name: &str) -> &mut [f64] {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    /// Row `r` of a matrix parameter.
    pub fn matrix_row(&self, name: &str, r: usize) -> &[f64] {
        let e = &self.entries[name];
        match e.shape {
            ParamShape::Matrix(_, c) => &e.value[r * c..(r + 1) * c],
            ParamShape::Vector(_) => panic!("{name} is not a matrix"),
        }
    }

    pub fn matrix_dims(&self, name: &str) -> (usize, usize) {
        match self.entries[name].shape {
            ParamShape::Matrix(r, c) => (r, c),
            ParamShape::Vector(_) => panic!("{name} is not a matrix"),
        }
    }

    pub fn get_vector(&self, name: &str) -> Result<Tensor1> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))?;
        Tensor1::new(e.value.clone())
    }

    pub fn get_matrix(&self, name: &str) -> Result<Tensor2> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))?;
        match e.shape {
            ParamShape::Matrix(r, c) => Tensor2::new(r, c, e.value.clone()),
            ParamShape::Vector(_) => Err(Error::Shape(format!("{name} is not a matrix"))),
        }
    }

    /// Fresh zero gradients covering every parameter.
    pub fn zero_gradients(&self) -> Gradients {
        let mut g = Gradients::new();
        for (name, e) in &self.entries {
            g.map.insert(name.clone(), vec![0.0; e.value.len()]);
        }
        g
    }

    /// One Adam update. Every gradient must match its parameter's shape;
    /// parameters without a gradient entry are left untouched.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        for (name, g) in &grads.map {
            let e = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter {name}")))?;
            if g.len() != e.value.len() {
                return Err(Error::Shape(format!(
                    "gradient for {name}: {} entries vs parameter {}",
                    g.len(),
                    e.value.len()
                )));
            }
            e.step += 1;
            let t = e.step as f64;
            let bc1 = 1.0 - ADAM_BETA1.powf(t);
            let bc2 = 1.0 - ADAM_BETA2.powf(t);
            for i in 0..g.len() {
                let gi = g[i];
                e.adam_m[i] = ADAM_BETA1 * e.adam_m[i] + (1.0 - ADAM_BETA1) * gi;
                e.adam_v[i] = ADAM_BETA2 * e.adam_v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = e.adam_m[i] / bc1;
                let v_hat = e.adam_v[i] / bc2;
                e.value[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    pub fn step_count(&self, name: &str) -> u64 {
        self.entries[name].step
    }

    pub fn assert_finite(&self) -> Result<()> {
        for (name, e) in &self.entries {
            if e.value.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite value in {name}")));
            }
            if e.adam_v.iter().any(|x| *x < 0.0) {
                return Err(Error::Numeric(format!("negative second moment in {name}")));
            }
        }
        Ok(())
    }
}
