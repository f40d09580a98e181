use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{CkfError, Result};

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(CkfError::contract(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(slot) if slot.shape() == t.shape() => {
                *slot = t;
                Ok(())
            }
            Some(slot) => Err(CkfError::Dimension {
                op: "ParamStore::set",
                left: slot.shape().to_vec(),
                right: t.shape().to_vec(),
            }),
            None => Err(CkfError::contract(format!("unknown parameter {name}"))),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| CkfError::contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| CkfError::contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count of the tensors whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        for (name, t) in self.iter() {
            h.bytes(name.as_bytes());
            t.shape().iter().for_each(|&d| h.bytes(&(d as u64).to_le_bytes()));
            h.floats(t.data());
        }
        h.0
    }
}

pub(crate) struct Fnv(pub u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xCBF2_9CE4_8422_2325)
    }
}

impl Fnv {
    pub fn bytes(&mut self, b: &[u8]) {
        for &x in b {
            self.0 ^= u64::from(x);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }

    pub fn floats(&mut self, xs: &[f64]) {
        for x in xs {
            self.bytes(&x.to_bits().to_le_bytes());
        }
    }
}

/// Fingerprint of one tensor's values.
pub fn tensor_fingerprint(t: &Tensor) -> u64 {
    let mut h = Fnv::default();
    h.floats(t.data());
    h.0
}

/// Tape leaves for a set of named parameters.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, super::tape::Var>,
}

impl Bindings {
    /// Registers every parameter of `params` on `tape`; `trainable` decides
    /// which leaves receive gradients.
    pub fn bind(tape: &mut super::tape::Tape, params: &ParamStore, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (name.to_string(), tape.leaf(t.clone(), trainable(name))))
            .collect();
        Self { vars }
    }

    /// Binds `name` to an existing variable, replacing any previous entry.
    pub fn with(mut self, name: &str, var: super::tape::Var) -> Self {
        self.vars.insert(name.to_string(), var);
        self
    }

    pub fn get(&self, name: &str) -> Result<super::tape::Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| CkfError::contract(format!("parameter {name} not bound")))
    }

    pub fn opt(&self, name: &str) -> Option<super::tape::Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, super::tape::Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
