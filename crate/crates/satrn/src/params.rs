//! Named parameter storage and deterministic initialization.
//!
//! Parameters are registered in a fixed order under stable dotted names
//! (e.g. `encoder.block3.attn.wq`), which is also the checkpoint order. All
//! values are kept f32-representable so checkpoints round-trip bit-exactly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Index of a parameter in its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter_mut())
    }

    /// Total trainable element count — the runtime side of the
    /// parameter-counting oracle.
    pub fn total_elements(&self) -> u64 {
        self.tensors.iter().map(|t| t.numel() as u64).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| {
                    let mut c = t.cast::<U>();
                    c.enable_grad();
                    c
                })
                .collect(),
        }
    }
}

/// How a builder fills parameter values.
pub enum BuildMode<T: Scalar> {
    /// Fan-based uniform init for weights, zeros/ones for biases and norms.
    Random(ChaCha8Rng),
    /// Take tensors from a checkpoint by name, verifying shapes.
    Load(HashMap<String, Tensor<T>>),
}

pub struct ParamBuilder<T: Scalar> {
    mode: BuildMode<T>,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamBuilder<T> {
    pub fn random(seed: u64) -> Self {
        ParamBuilder {
            mode: BuildMode::Random(ChaCha8Rng::seed_from_u64(seed)),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn from_tensors(map: HashMap<String, Tensor<T>>) -> Self {
        ParamBuilder { mode: BuildMode::Load(map), names: Vec::new(), tensors: Vec::new() }
    }

    fn add(&mut self, name: String, shape: &[usize], fill: Fill) -> Result<ParamId> {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        let mut t = match &mut self.mode {
            BuildMode::Random(rng) => match fill {
                Fill::Glorot { fan_in, fan_out } => {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Tensor::from_fn(shape, |_| {
                        T::from_f64(rng.gen_range(-limit..limit)).snap_f32()
                    })
                }
                Fill::Zeros => Tensor::zeros(shape),
                Fill::Ones => Tensor::full(shape, T::one()),
            },
            BuildMode::Load(map) => {
                let t = map.remove(&name).ok_or_else(|| {
                    Error::CorruptCheckpoint(format!("missing tensor {name:?}"))
                })?;
                if t.shape() != shape {
                    return Err(Error::CorruptCheckpoint(format!(
                        "tensor {name:?} has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )));
                }
                t
            }
        };
        t.enable_grad();
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
    }

    /// Weight matrix or kernel with Glorot-uniform init at the given fans.
    pub fn weight(&mut self, name: String, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId> {
        self.add(name, shape, Fill::Glorot { fan_in, fan_out })
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        self.add(name, shape, Fill::Zeros)
    }

    pub fn ones(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        self.add(name, shape, Fill::Ones)
    }

    pub fn finish(self) -> Result<ParamSet<T>> {
        if let BuildMode::Load(map) = &self.mode {
            if let Some(name) = map.keys().next() {
                return Err(Error::CorruptCheckpoint(format!(
                    "checkpoint contains tensor {name:?} not present in the config's architecture"
                )));
            }
        }
        Ok(ParamSet { names: self.names, tensors: self.tensors })
    }
}

enum Fill {
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}
