use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A named dense tensor belonging to one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub group: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// All trainable state of a model, keyed by parameter name. Both Siamese
/// branches read the same store; there is no per-branch copy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: &str, shape: &[usize], data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.insert(
            name.into(),
            Param {
                group: group.to_string(),
                shape: shape.to_vec(),
                data,
            },
        );
    }

    /// Panics on an unknown name: parameter names are fixed by the
    /// architecture that created the store.
    pub fn get(&self, name: &str) -> &[f64] {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("no parameter `{name}`"))
            .data
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f64] {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter `{name}`"))
            .data
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.params.values().map(|p| p.group.clone()).collect()
    }

    pub fn remove_group(&mut self, group: &str) {
        self.params.retain(|_, p| p.group != group);
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    /// Flat `(name, offset)` addressing of every scalar, in name order.
    pub fn coordinates(&self) -> Vec<(String, usize)> {
        self.params
            .iter()
            .flat_map(|(n, p)| (0..p.data.len()).map(move |i| (n.clone(), i)))
            .collect()
    }

    /// SHA-256 over names, shapes and exact bit patterns of one group.
    pub fn group_hash(&self, group: &str) -> Result<String> {
        if !self.params.values().any(|p| p.group == group) {
            return Err(Error::UnknownGroup(group.to_string()));
        }
        Ok(self.hash_where(|p| p.group == group))
    }

    pub fn hash(&self) -> String {
        self.hash_where(|_| true)
    }

    fn hash_where(&self, keep: impl Fn(&Param) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(_, p)| keep(p)) {
            h.update(name.as_bytes());
            h.update([0]);
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Gradient buffers mirroring a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    grads: BTreeMap<String, Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .iter()
                .map(|(n, p)| (n.clone(), vec![0.0; p.data.len()]))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self.grads[name]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f64] {
        self.grads
            .get_mut(name)
            .unwrap_or_else(|| panic!("no gradient buffer `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.grads.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().flatten().all(|v| v.is_finite())
    }
}
