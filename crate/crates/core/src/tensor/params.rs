//! Named trainable parameters with their Adam moment buffers.

use crate::error::{Error, Result};
use std::collections::BTreeMap;

pub struct Param {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn grad(&self) -> &[f64] {
        &self.grad
    }
    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.grad.len());
        for (g, d) in self.grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn scale_grad(&mut self, s: f64) {
        for g in self.grad.iter_mut() {
            *g *= s;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Flat registry of parameters; indices are stable after creation and
/// creation order is deterministic, so checkpoints round-trip exactly.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> usize {
        let name = name.into();
        let numel: usize = shape.iter().product();
        assert_eq!(numel, values.len(), "param {name}: shape/data mismatch");
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let idx = self.entries.len();
        self.entries.push(Param {
            name: name.clone(),
            shape: shape.to_vec(),
            grad: vec![0.0; numel],
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            values,
        });
        self.by_name.insert(name, idx);
        idx
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|p| p.numel()).sum()
    }

    pub fn entry(&self, idx: usize) -> &Param {
        &self.entries[idx]
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.entries[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.iter_mut() {
            p.zero_grad();
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Overwrite values from another store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::contract("parameter stores differ in entry count"));
        }
        for (dst, src) in self.entries.iter_mut().zip(other.entries.iter()) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(Error::contract(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    dst.name, dst.shape, src.name, src.shape
                )));
            }
            dst.values.copy_from_slice(&src.values);
            dst.m.copy_from_slice(&src.m);
            dst.v.copy_from_slice(&src.v);
        }
        Ok(())
    }
}
