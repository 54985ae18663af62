use std::collections::BTreeSet;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Named parameters with a frozen subset that optimizers must not touch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Tensor<T>>,
    frozen: BTreeSet<String>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::State(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn insert_frozen(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        self.insert(name.clone(), tensor)?;
        self.frozen.insert(name);
        Ok(())
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        if !self.entries.contains_key(name) {
            return Err(Error::State(format!("cannot freeze unknown parameter {name:?}")));
        }
        self.frozen.insert(name.to_string());
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.frozen.extend(self.entries.keys().cloned());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.names().filter(|n| !self.frozen.contains(*n))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// L2 norm per parameter, used in divergence diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.entries
            .iter()
            .map(|(k, t)| {
                let n = t.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
                (k.clone(), n)
            })
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian f64 images of the values,
    /// restricted to entries accepted by `filter`.
    pub fn hash_where(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.entries.iter().filter(|(k, _)| filter(k)) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn hash(&self) -> String {
        self.hash_where(|_| true)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            frozen: self.frozen.clone(),
        }
    }

    /// Moves every entry of `other` in under `prefix`, keeping frozen flags.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamStore<T>) -> Result<()> {
        for (k, v) in &other.entries {
            let name = format!("{prefix}{k}");
            if other.frozen.contains(k) {
                self.insert_frozen(name, v.clone())?;
            } else {
                self.insert(name, v.clone())?;
            }
        }
        Ok(())
    }

    /// Splits off every entry whose name starts with `prefix`, stripping it.
    pub fn take_prefixed(&mut self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        let keys: Vec<String> = self
            .entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        for k in keys {
            let t = self.entries.shift_remove(&k).expect("key listed");
            let short = k[prefix.len()..].to_string();
            if self.frozen.remove(&k) {
                out.frozen.insert(short.clone());
            }
            out.entries.insert(short, t);
        }
        out
    }
}
