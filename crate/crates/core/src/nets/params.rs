use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors of one model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

pub(crate) const INIT_STD: f64 = 0.02;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub(crate) fn add_normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut R) -> ParamId {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || normal.sample(rng));
        self.add(name, value)
    }

    pub(crate) fn add_const(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        self.add(name, ArrayD::from_elem(IxDyn(shape), v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Puts every parameter on the tape, as differentiable leaves when
    /// `trainable` and as constants otherwise. The result is indexed by
    /// [`ParamId::index`].
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect()
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {name} has shape {:?}, got {:?}",
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }
}
