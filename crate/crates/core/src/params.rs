//! Named parameter storage shared by every mode and head.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamGrads, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered collection of named tensors. Insertion order is the checkpoint
/// manifest order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("ParamStore::insert", format!("duplicate parameter {name:?}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(self.id(name)?))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total scalar count over parameters whose name satisfies `filter`.
    pub fn count_where(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.iter().filter(|(_, n, _)| filter(n)).map(|(_, _, t)| t.numel()).sum()
    }

    pub fn count(&self) -> usize {
        self.count_where(|_| true)
    }

    /// Adds `scale · grad` to every parameter with a gradient.
    pub fn apply(&mut self, grads: &ParamGrads, scale: f64) {
        for (id, g) in grads.iter() {
            for (p, d) in self.tensors[id.0].data_mut().iter_mut().zip(g.data()) {
                *p += scale * d;
            }
        }
    }
}

/// BERT-style initializer: normal(0, σ) truncated to ±2σ by resampling.
pub fn truncated_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = loop {
            let s: f64 = normal.sample(rng);
            if s.abs() <= 2.0 * std {
                break s;
            }
        };
    }
    t
}
