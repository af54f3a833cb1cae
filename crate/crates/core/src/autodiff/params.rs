use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
}

/// Named learnable tensors together with their gradient buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate param {name}");
        let grad = vec![0.0; value.len()];
        self.entries.push(Entry { name, value, grad });
        ParamId(self.entries.len() - 1)
    }

    /// Glorot-uniform `fan_in×fan_out` weight matrix.
    pub fn add_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        self.add(name, Tensor::from_parts(vec![fan_in, fan_out], data))
    }

    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        limit: f64,
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn add_filled(&mut self, name: impl Into<String>, n: usize, value: f64) -> ParamId {
        self.add(name, Tensor::vector(vec![value; n]))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Name → value snapshot of every parameter accepted by `keep`.
    pub fn snapshot(&self, keep: impl Fn(&str) -> bool) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .filter(|e| keep(&e.name))
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }

    /// Overwrites values by name. Returns the names that were absent or
    /// whose shapes disagree.
    pub fn restore(&mut self, values: &BTreeMap<String, Tensor>) -> Vec<String> {
        let mut problems = Vec::new();
        for (name, t) in values {
            match self.entries.iter_mut().find(|e| &e.name == name) {
                Some(e) if e.value.shape() == t.shape() => e.value = t.clone(),
                _ => problems.push(name.clone()),
            }
        }
        problems
    }
}

/// Every parameter of a store recorded once on a tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn new(tape: &'t Tape, store: &ParamStore) -> Self {
        Self {
            vars: store.ids().map(|id| tape.param(store, id)).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn tape(&self) -> &'t Tape {
        self.vars[0].tape()
    }
}
