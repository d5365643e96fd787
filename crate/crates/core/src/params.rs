//! Named parameter storage and the small layers built on it.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Conv2dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Float = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        tensor.requires_grad = true;
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> Result<&Tensor<T>> {
        self.tensors
            .get(id.0)
            .ok_or_else(|| Error::contract(format!("unknown parameter id {}", id.0)))
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(id.0)
            .ok_or_else(|| Error::contract(format!("unknown parameter id {}", id.0)))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    /// Replaces a tensor's values; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(id)?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "param_set",
                format!("{:?} -> {:?}", slot.shape(), value.shape()),
            ));
        }
        slot.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &str, &mut Tensor<T>)> {
        self.tensors
            .iter_mut()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the parameter gradients held by a differentiated graph.
    pub fn accumulate_grads(&mut self, g: &Graph<'_, T>) -> Result<()> {
        let pending: Vec<(ParamId, Vec<T>)> = g
            .param_leaves()
            .filter_map(|(id, v)| g.grad(v).map(|d| (id, d.to_vec())))
            .collect();
        for (id, delta) in pending {
            self.get_mut(id)?.accumulate_grad(&delta)?;
        }
        Ok(())
    }
}

/// Creates parameters under a dotted name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore<f32>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = self.path(name);
        ParamBuilder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn tensor(&mut self, name: &str, tensor: Tensor<f32>) -> Result<ParamId> {
        let path = self.path(name);
        self.store.add(path, tensor)
    }

    /// Overwrites an already created parameter.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<f32>) -> Result<()> {
        self.store.set(id, tensor)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::full(shape.to_vec(), 1.0))
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound) as f32)
            .collect();
        self.tensor(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *self.rng);
                (z * std) as f32
            })
            .collect();
        self.tensor(name, Tensor::new(shape.to_vec(), data)?)
    }
}

/// `y = x·W + b` over the last axis; `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let mut pb = pb.sub(name);
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = pb.uniform("weight", &[in_dim, out_dim], bound)?;
        let bias = if bias { Some(pb.zeros("bias", &[out_dim])?) } else { None };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = self.bias.map(|b| g.param(b)).transpose()?;
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(Self {
            gamma: pb.ones("gamma", &[dim])?,
            beta: pb.zeros("beta", &[dim])?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        g.layer_norm(x, gamma, beta)
    }
}

/// Dense convolution over `[H, W, C]` maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        spec: Conv2dSpec,
    ) -> Result<Self> {
        let mut pb = pb.sub(name);
        let bound = 1.0 / ((spec.kernel * spec.kernel * cin) as f64).sqrt();
        Ok(Self {
            weight: pb.uniform("weight", &[spec.kernel, spec.kernel, cin, cout], bound)?,
            bias: pb.zeros("bias", &[cout])?,
            spec,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        g.conv2d(x, w, Some(b), self.spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn names_are_prefixed_and_unique() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let lin = Linear::new(&mut pb.sub("enc"), "proj", 3, 2, true).unwrap();
        assert_eq!(store.name(lin.weight), "enc.proj.weight");
        assert_eq!(store.find("enc.proj.bias"), lin.bias);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        assert!(Linear::new(&mut pb.sub("enc"), "proj", 3, 2, true).is_err());
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::zeros(vec![2])).unwrap();
        assert!(store.set(id, Tensor::zeros(vec![3])).is_err());
    }
}
