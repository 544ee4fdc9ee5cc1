use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named tensors with per-name freeze flags.
///
/// Iteration is in name order, which keeps optimizer updates and
/// serialization deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Binds a parameter into a graph: trainable unless frozen or `detached`.
    pub fn bind(&self, graph: &mut Graph, name: &str, detached: bool) -> Result<NodeId> {
        let t = self.get(name)?.clone();
        Ok(graph.leaf(t, !detached && !self.is_frozen(name)))
    }

    /// SHA-256 over names, shapes and the bit patterns of all values of the
    /// selected parameters.
    pub fn content_hash<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<String> {
        let mut hasher = Sha256::new();
        for name in names {
            let t = self.get(name)?;
            hasher.update(name.as_bytes());
            for d in t.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn full_hash(&self) -> String {
        let names: Vec<&str> = self.names().collect();
        self.content_hash(names).expect("names come from the store")
    }
}
