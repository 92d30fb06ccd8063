use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::graph::{Graph, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Named, ordered parameter tensors. Order is stable and defines checkpoint
/// layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    /// Linear weight `[fan_in × fan_out]`, uniform in ±1/√fan_in.
    pub fn push_linear_weight(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        self.push(name, Tensor::new(vec![fan_in, fan_out], data).expect("shape"))
    }

    /// Linear bias, uniform in ±1/√fan_in.
    pub fn push_linear_bias(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_out)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        self.push(name, Tensor::vector(data))
    }

    /// Embedding table `[rows × dim]` drawn from N(0, 0.02²).
    pub fn push_embedding(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> usize {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let data = (0..rows * dim).map(|_| T::of(normal.sample(rng))).collect();
        self.push(name, Tensor::new(vec![rows, dim], data).expect("shape"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Binds every parameter as a graph leaf; `trainable` decides whether the
    /// leaves collect gradients.
    pub fn bind<'r>(&self, g: &mut Graph<'r, T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Collects gradients for bound leaves; unreached leaves get zeros.
    pub fn grads_from<'r>(&self, g: &Graph<'r, T>, vars: &[Var]) -> Vec<Vec<T>> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(&v, t)| match g.grad(v) {
                Some(gr) => gr.data().to_vec(),
                None => vec![T::zero(); t.len()],
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Overwrites values from another store with identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::contract("parameter name tables differ"));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("copy_from", dst.shape(), src.shape()));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// SHA-256 over names, shapes, and little-endian f32 values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
