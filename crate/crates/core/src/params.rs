//! Named, ordered collection of the trainable (and bookkeeping) tensors of
//! one network. Iteration order is insertion order; serialization and
//! optimizer state alignment depend on it.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::CsiError;
use crate::rng::Prng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a tensor is filled when the network is materialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in +-sqrt(6 / (fan_in + fan_out)).
    GlorotUniform { fan_in: usize, fan_out: usize },
    /// Uniform in +-bound.
    ScaledUniform { bound: f64 },
    Constant(f64),
}

#[derive(Debug, Clone)]
pub struct ParamEntry<S: Scalar> {
    pub name: String,
    pub tensor: Tensor<S>,
    /// Non-trainable entries (normalization running statistics) are counted
    /// by the parameter audit and serialized, but never receive gradients.
    pub trainable: bool,
    pub init: Init,
}

#[derive(Debug, Clone, Default)]
pub struct ParameterSet<S: Scalar> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> ParameterSet<S> {
    pub fn new() -> Self {
        ParameterSet {
            entries: Vec::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        trainable: bool,
        init: Init,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(CsiError::Config(format!("duplicate parameter {name}")));
        }
        let mut tensor = Tensor::zeros(shape);
        tensor.requires_grad = trainable;
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
            init,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Fill every tensor from its initializer record, consuming draws from
    /// `rng` in insertion order.
    pub fn materialize(&mut self, rng: &mut Prng) {
        for entry in &mut self.entries {
            match entry.init {
                Init::Constant(c) => {
                    let v = S::from_f64(c);
                    entry.tensor.data_mut().fill(v);
                }
                Init::GlorotUniform { fan_in, fan_out } => {
                    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
                    for v in entry.tensor.data_mut() {
                        *v = S::from_f64(rng.uniform(-bound, bound));
                    }
                }
                Init::ScaledUniform { bound } => {
                    for v in entry.tensor.data_mut() {
                        *v = S::from_f64(rng.uniform(-bound, bound));
                    }
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry<S> {
        &mut self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].tensor
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .map(ParamId)
            .collect()
    }

    /// Total scalar count across all entries, trainable or not.
    pub fn total_scalars(&self) -> u64 {
        self.entries.iter().map(|e| e.tensor.numel() as u64).sum()
    }

    /// Accumulate a gradient bundle produced by `Graph::backward` into the
    /// tensors' grad buffers.
    pub fn store_grads(&mut self, grads: Vec<(ParamId, Vec<S>)>) {
        for (id, g) in grads {
            self.entries[id.0].tensor.accumulate_grad(&g);
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }
}
