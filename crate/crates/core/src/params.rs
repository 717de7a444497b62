use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{MatError, Result};
use crate::numerics::{Gradients, Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Index of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replaces values by name; every name in `self` must be present.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let src = other
                .id(name)
                .map(|id| other.get(id))
                .ok_or_else(|| MatError::Format(format!("missing parameter {name}")))?;
            if src.shape() != value.shape() {
                return Err(MatError::shape(
                    "load parameter",
                    value.shape(),
                    src.shape(),
                ));
            }
            *value = src.clone();
        }
        Ok(())
    }

    /// Puts every parameter on `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bound {
        Bound(self.values.iter().map(|v| graph.param(v.clone())).collect())
    }

    /// Puts every parameter on `graph` as a constant.
    pub fn bind_frozen(&self, graph: &mut Graph<T>) -> Bound {
        Bound(
            self.values
                .iter()
                .map(|v| graph.constant(v.clone()))
                .collect(),
        )
    }

    /// Gradient for every parameter, in store order.
    pub fn collect_grads(
        &self,
        graph: &Graph<T>,
        grads: &Gradients<T>,
        bound: &Bound,
    ) -> Vec<Tensor<T>> {
        bound.0.iter().map(|&v| grads.get(graph, v)).collect()
    }
}

/// Graph handles for a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Xavier-uniform matrix.
pub fn xavier<T: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
    let data: Vec<f64> = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::from_f64(vec![rows, cols], &data).expect("shape")
}

pub fn normal<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_f64(shape.to_vec(), &data).expect("shape")
}
