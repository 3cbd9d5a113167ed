//! Named parameter store.
//!
//! Every learnable tensor in the network lives here under a dotted path name
//! (`backbone.stage0.block1.attn.w_q`, ...). Registration order is fixed by
//! construction order, which keeps optimizer sweeps, checkpoints and
//! parameter audits deterministic.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::DTensor;

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<DTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: DTensor) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Weight matrix initialized N(0, std), registered as trainable.
    pub fn add_weight(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        let numel: usize = shape.iter().product();
        let values = (0..numel).map(|_| rng.normal(0.0, std)).collect();
        self.add(name, DTensor::param(shape.to_vec(), values).unwrap())
    }

    /// Constant-fill parameter (biases, layer-norm gains).
    pub fn add_fill(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        let numel: usize = shape.iter().product();
        self.add(name, DTensor::param(shape.to_vec(), vec![v; numel]).unwrap())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &DTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DTensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DTensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        self.tensors[id.0].accumulate_grad(delta);
    }

    /// Freeze every parameter whose name starts with `prefix`. Returns the
    /// number of parameters frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if name.starts_with(prefix) {
                t.set_frozen(true);
                n += 1;
            }
        }
        n
    }

    /// Total scalar parameter count.
    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Scalar count of parameters the optimizer will actually move.
    pub fn tuned_scalars(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.trainable() && !t.frozen())
            .map(|t| t.numel())
            .sum()
    }

    /// Load values (and frozen flags) from another store by name. Every
    /// parameter present in both must agree on shape; parameters missing from
    /// `source` keep their current values.
    pub fn load_matching(&mut self, source: &ParamStore) -> Result<usize> {
        let mut loaded = 0;
        for (name, tensor) in self.names.iter().zip(self.tensors.iter_mut()) {
            if let Some(src_id) = source.id_by_name(name) {
                let src = source.get(src_id);
                if src.shape() != tensor.shape() {
                    return Err(Error::Checkpoint(format!(
                        "shape-incompatible checkpoint: {name} has {:?}, expected {:?}",
                        src.shape(),
                        tensor.shape()
                    )));
                }
                tensor.values_mut().copy_from_slice(src.values());
                tensor.set_frozen(src.frozen());
                loaded += 1;
            }
        }
        Ok(loaded)
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}
