use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named network parameters in a stable (lexicographic) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Option<Tensor<T>> {
        self.entries.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| TensorError::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Entries whose name starts with `prefix`, re-keyed under `new_prefix`.
    pub fn extract_prefix(&self, prefix: &str, new_prefix: &str) -> Self {
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(prefix)
                    .map(|rest| (format!("{new_prefix}{rest}"), v.clone()))
            })
            .collect();
        ParameterSet { entries }
    }

    /// Moves every entry of `other` in, prefixing its name.
    pub fn merge_prefixed(&mut self, prefix: &str, other: ParameterSet<T>) {
        for (k, v) in other.entries {
            self.entries.insert(format!("{prefix}{k}"), v);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn map_values(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        for (k, v) in &mut self.entries {
            f(k, v);
        }
    }

    /// Order-sensitive FNV-1a digest over names, shapes and raw value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (k, v) in &self.entries {
            eat(k.as_bytes());
            for d in v.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for x in v.data() {
                eat(&x.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Lazily records parameters of a [`ParameterSet`] onto a [`Graph`] as they
/// are first requested, remembering node ids so gradients can be collected
/// by name after the backward sweep.
pub struct Binder<'a, T> {
    params: &'a ParameterSet<T>,
    bound: BTreeMap<String, NodeId>,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    /// Every parameter receives gradients.
    pub fn trainable(params: &'a ParameterSet<T>) -> Self {
        Self::with_filter(params, |_| true)
    }

    /// No parameter receives gradients.
    pub fn frozen(params: &'a ParameterSet<T>) -> Self {
        Self::with_filter(params, |_| false)
    }

    /// Parameters for which `trainable(name)` holds receive gradients.
    pub fn with_filter(params: &'a ParameterSet<T>, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Binder {
            params,
            bound: BTreeMap::new(),
            trainable: Box::new(trainable),
        }
    }

    pub fn params(&self) -> &'a ParameterSet<T> {
        self.params
    }

    pub fn get(&mut self, g: &mut Graph<T>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let value = self.params.require(name)?.clone();
        let id = if (self.trainable)(name) {
            g.leaf(value)
        } else {
            g.constant(value)
        };
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get_opt(&mut self, g: &mut Graph<T>, name: &str) -> Result<Option<NodeId>> {
        if self.params.contains(name) {
            self.get(g, name).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Gradients of every bound trainable parameter that was reached.
    pub fn collect(&self, grads: &mut Gradients<T>) -> ParameterSet<T> {
        let mut out = ParameterSet::new();
        for (name, &id) in &self.bound {
            if (self.trainable)(name) {
                if let Some(g) = grads.take(id) {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}
