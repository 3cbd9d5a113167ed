//! Dense n-dimensional f64 array with an optional gradient accumulator.

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
///
/// `grad` is present iff the tensor participates in backpropagation.
/// `trainable` marks tensors the optimizer may update; `frozen` pins the
/// value bit-for-bit even when gradient flows into it.
#[derive(Debug, Clone, PartialEq)]
pub struct DTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    trainable: bool,
    frozen: bool,
}

impl DTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if numel != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {numel} values, got {}",
                values.len()
            )));
        }
        Ok(DTensor {
            shape,
            values,
            grad: None,
            trainable: false,
            frozen: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        DTensor {
            shape: shape.to_vec(),
            values: vec![0.0; numel],
            grad: None,
            trainable: false,
            frozen: false,
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        DTensor {
            shape: shape.to_vec(),
            values: vec![v; numel],
            grad: None,
            trainable: false,
            frozen: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        DTensor::new(vec![1], vec![v]).unwrap()
    }

    /// Trainable parameter: gradient accumulator allocated, optimizer-visible.
    pub fn param(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let mut t = DTensor::new(shape, values)?;
        t.grad = Some(vec![0.0; t.values.len()]);
        t.trainable = true;
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Accumulate (`+=`) into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        let g = self
            .grad
            .as_mut()
            .expect("accumulate_grad on tensor without grad buffer");
        assert_eq!(g.len(), delta.len(), "gradient length mismatch");
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
        if trainable && self.grad.is_none() {
            self.grad = Some(vec![0.0; self.values.len()]);
        }
    }

    /// Row-major linear index of a multi-index.
    pub fn index_of(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut lin = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            lin = lin * self.shape[i] + ix;
        }
        lin
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.values[self.index_of(idx)]
    }
}
