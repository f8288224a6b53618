use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::Real;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

/// Owns every parameter of a model. Names are stable dotted paths such as
/// `vqvae.encoder.fc1.weight` and are unique within a store.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<T>) -> Result<ParamId> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if value.len() != numel {
            return Err(Error::shape("param", format!("{name}: {} values for shape {shape:?}", value.len())));
        }
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, shape: shape.to_vec(), grad: vec![T::zero(); numel], value });
        Ok(ParamId(id))
    }

    /// Gaussian(0, std) initialization.
    pub fn add_normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        let value = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::lit(z * std)
            })
            .collect();
        self.add(name, shape, value)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], fill: f64) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        self.add(name, shape, vec![T::lit(fill); numel])
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Overwrites the value of a named parameter, checking its shape.
    pub fn set(&mut self, name: &str, shape: &[usize], value: Vec<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let p = &mut self.params[id.0];
        if p.shape != shape || value.len() != p.value.len() {
            return Err(Error::shape("param", format!("{name}: stored {:?}, given {shape:?}", p.shape)));
        }
        p.value = value;
        Ok(())
    }
}
