use std::collections::HashMap;

use pirt_tensor::{Real, Tensor};
use rand::Rng;

use crate::error::{PirtError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Running statistics are stored alongside weights but never optimized.
    pub trainable: bool,
}

/// Named parameter and buffer tensors of a model, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, trainable });
        id
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let value = Tensor::from_fn(shape, |_| pirt_tensor::cst(rng.random_range(-bound..=bound)));
        self.add(name, value, true)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn num_trainable_values(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    /// Replaces every tensor with the same-named tensor from `other`, checking
    /// that names and shapes agree exactly.
    pub fn load_from(&mut self, other: &[(String, Tensor<T>)]) -> Result<()> {
        if other.len() != self.entries.len() {
            return Err(PirtError::Config(format!(
                "parameter count mismatch: model has {}, source has {}",
                self.entries.len(),
                other.len()
            )));
        }
        for (name, value) in other {
            let id = self
                .id(name)
                .ok_or_else(|| PirtError::Config(format!("unknown parameter {name}")))?;
            if self.get(id).shape() != value.shape() {
                return Err(PirtError::Config(format!(
                    "parameter {name}: shape {:?} does not match model shape {:?}",
                    value.shape(),
                    self.get(id).shape()
                )));
            }
            *self.get_mut(id) = value.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
