use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::graph::{Grads, Graph};
use super::rng::PortableRng;
use super::tensor::{Elem, Tensor};
use crate::error::{Error, Result};

/// A named learnable tensor.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor<f32>,
    pub grad: Option<Tensor<f32>>,
    pub frozen: bool,
}

/// Ordered collection of parameters addressed by dotted path
/// (`unet.down.0.res.1.conv1.weight`).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, tensor, grad: None, frozen: false });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name).map(|p| &p.tensor).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
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

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.tensor.numel()).sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.tensor.numel()).sum()
    }

    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
        }
    }

    /// Move every parameter of `other` into this store.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for p in other.params {
            let frozen = p.frozen;
            let name = p.name.clone();
            self.insert(p.name, p.tensor)?;
            self.get_mut(&name).expect("just inserted").frozen = frozen;
        }
        Ok(())
    }

    /// Subset of parameters under `prefix`.
    pub fn filtered(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            out.insert(p.name.clone(), p.tensor.clone()).expect("names unique");
            out.get_mut(&p.name).expect("present").frozen = p.frozen;
        }
        out
    }

    /// SHA-256 over names, shapes and little-endian data of parameters under
    /// `prefix`, in store order.
    pub fn hash(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(p.tensor.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Add the gradients of every parameter bound on `graph` into `Parameter::grad`.
    pub fn accumulate_grads<T: Elem>(&mut self, graph: &Graph<T>, grads: &Grads<T>) {
        for (name, var) in graph.bound_params() {
            let Some(g) = grads.raw(var) else { continue };
            let Some(p) = self.get_mut(name) else { continue };
            if p.frozen {
                continue;
            }
            match &mut p.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, &b)| *a += b.f64() as f32),
                slot => {
                    let data = g.iter().map(|&v| v.f64() as f32).collect();
                    *slot = Some(Tensor::new(p.tensor.shape().to_vec(), data).expect("grad shape"));
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

/// Deterministic initializers.
pub mod init {
    use super::*;

    /// Kaiming-uniform fan-in initialization: `U(−b, b)` with `b = √(6 / fan_in)`
    /// scaled by `gain`.
    pub fn kaiming(shape: &[usize], fan_in: usize, gain: f64, rng: &mut PortableRng) -> Tensor<f32> {
        let bound = gain * (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_range(-bound, bound) as f32).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }

    pub fn conv(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut PortableRng,
    ) -> Result<()> {
        let w = kaiming(&[cout, cin, k, k], cin * k * k, 1.0, rng);
        store.insert(format!("{name}.weight"), w)?;
        store.insert(format!("{name}.bias"), Tensor::zeros([cout]))
    }

    pub fn zero_conv(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        store.insert(format!("{name}.weight"), Tensor::zeros([cout, cin, k, k]))?;
        store.insert(format!("{name}.bias"), Tensor::zeros([cout]))
    }

    pub fn linear(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut PortableRng) -> Result<()> {
        store.insert(format!("{name}.weight"), kaiming(&[din, dout], din, 1.0, rng))?;
        store.insert(format!("{name}.bias"), Tensor::zeros([dout]))
    }

    pub fn norm(store: &mut ParamStore, name: &str, c: usize) -> Result<()> {
        store.insert(format!("{name}.gamma"), Tensor::full([c], 1.0))?;
        store.insert(format!("{name}.beta"), Tensor::zeros([c]))
    }
}
