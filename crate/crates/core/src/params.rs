//! Trainable parameter storage, shared by the encoder, the attention head
//! and the optimizer.
//!
//! Parameters live outside any tape. Each training step binds them onto a
//! fresh [`Tape`] (frozen tensors as constants, trainable ones as leaves),
//! runs forward/backward, then pulls the tape gradients back into the
//! [`Parameter::grad`] accumulators for the optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Result, Tape, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols);
        let n = values.len();
        Parameter { name: name.into(), rows, cols, values, grad: vec![0.0; n], frozen: false }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, rows, cols, vec![0.0; rows * cols])
    }

    /// Glorot/Xavier uniform: +-sqrt(6 / (rows + cols)).
    pub fn xavier(name: impl Into<String>, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        Self::new(name, rows, cols, values)
    }

    /// Uniform in +-bound.
    pub fn uniform(name: impl Into<String>, rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let values = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        Self::new(name, rows, cols, values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Ordered collection of named parameters. Order is insertion order and is
/// what the checkpoint format and the optimizer iterate in.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: Parameter) {
        debug_assert!(self.get(&p.name).is_none(), "duplicate parameter {}", p.name);
        self.params.push(p);
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Merge another set into this one (used to combine encoder and head).
    pub fn extend(&mut self, other: ParamSet) {
        for p in other.params {
            self.push(p);
        }
    }

    /// Register every parameter on `tape`. Frozen parameters become
    /// constants and therefore receive no gradient.
    pub fn bind(&self, tape: &Tape) -> Result<BoundParams> {
        let mut map = HashMap::with_capacity(self.params.len());
        for p in &self.params {
            let t = if p.frozen {
                tape.constant(p.rows, p.cols, p.values.clone())?
            } else {
                tape.leaf(p.rows, p.cols, p.values.clone())?
            };
            map.insert(p.name.clone(), t);
        }
        Ok(BoundParams { map })
    }

    /// Add `scale` times the bound tensors' gradients into the grad
    /// accumulators. Parameters untouched by the forward pass contribute
    /// nothing.
    pub fn accumulate_grads(&mut self, bound: &BoundParams, scale: f64) {
        for p in &mut self.params {
            if p.frozen {
                continue;
            }
            if let Some(g) = bound.map.get(&p.name).and_then(|t| t.grad()) {
                for (acc, gi) in p.grad.iter_mut().zip(&g) {
                    *acc += scale * gi;
                }
            }
        }
    }
}

/// Parameters bound onto one tape for a single forward/backward pass.
pub struct BoundParams {
    map: HashMap<String, Tensor>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| TensorError::Usage(format!("parameter {name} not bound")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn frozen_params_receive_no_grads() {
        let mut set = ParamSet::new();
        set.push(Parameter::new("a", 1, 2, vec![1.0, 2.0]));
        let mut frozen = Parameter::new("b", 1, 2, vec![3.0, 4.0]);
        frozen.frozen = true;
        set.push(frozen);

        let tape = Tape::new();
        let bound = set.bind(&tape).unwrap();
        let a = bound.get("a").unwrap().clone();
        let b = bound.get("b").unwrap().clone();
        let loss = a.mul(&b).unwrap().sum().unwrap();
        loss.backward().unwrap();

        set.accumulate_grads(&bound, 1.0);
        assert_eq!(set.get("a").unwrap().grad, vec![3.0, 4.0]);
        assert_eq!(set.get("b").unwrap().grad, vec![0.0, 0.0]);
    }

    #[test]
    fn xavier_is_seed_reproducible() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let p1 = Parameter::xavier("w", 4, 4, &mut r1);
        let p2 = Parameter::xavier("w", 4, 4, &mut r2);
        assert_eq!(p1.values, p2.values);
        let bound = (6.0f64 / 8.0).sqrt();
        assert!(p1.values.iter().all(|v| v.abs() < bound));
    }
}
