use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Gradients, Graph};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn next_store_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameters with same-shaped gradient accumulators.
///
/// Every store carries a process-unique identity so that a [`Graph`] can tell
/// which store a parameter leaf came from. Cloning yields a new identity.
#[derive(Debug)]
pub struct ParameterStore {
    id: u64,
    seed: u64,
    rng: ChaCha8Rng,
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl Clone for ParameterStore {
    fn clone(&self) -> Self {
        ParameterStore {
            id: next_store_id(),
            seed: self.seed,
            rng: self.rng.clone(),
            names: self.names.clone(),
            values: self.values.clone(),
            grads: self.grads.clone(),
            lookup: self.lookup.clone(),
        }
    }
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            id: next_store_id(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.lookup.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let idx = self.values.len();
        self.grads.push(Tensor::zeros(value.shape().to_vec()));
        self.values.push(value);
        self.names.push(name.to_string());
        self.lookup.insert(name.to_string(), idx);
        Ok(ParamId(idx))
    }

    /// Uniform in `±sqrt(1 / fan_in)`.
    pub fn add_uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> Result<ParamId> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Adds the gradients of every parameter leaf of `graph` that belongs to
    /// this store.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) {
        for (store, index, var) in graph.param_leaves() {
            if store != self.id {
                continue;
            }
            if let Some(g) = grads.get(var) {
                for (acc, v) in self.grads[index].data_mut().iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }

    /// Copies values by name from `other`; both stores must share a layout.
    pub fn copy_values_from(&mut self, other: &ParameterStore) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let j = other.lookup.get(name).ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
            if other.values[*j].shape() != self.values[i].shape() {
                return Err(Error::Shape(format!("parameter `{name}` shape differs")));
            }
            self.values[i] = other.values[*j].clone();
        }
        Ok(())
    }

    /// Replaces the value of a named parameter, checking its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.find(name).ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` expects {:?}, got {:?}",
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}
