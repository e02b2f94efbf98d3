//! Named parameter tensors and their binding into a graph.

use std::collections::BTreeMap;

use samoe_numerics::{Graph, Rng, Scalar, Tensor, Var};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| CoreError::Config(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.map.remove(name)
    }

    /// Entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Normal init with standard deviation `1/sqrt(fan_in)`.
    pub fn init_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
        let std = 1.0 / (fan_in as f64).sqrt();
        self.insert(format!("{name}/w"), rng.normal_tensor(&[fan_in, fan_out], std));
        self.insert(format!("{name}/b"), Tensor::zeros(&[fan_out]));
    }

    pub fn init_norm(&mut self, name: &str, width: usize) {
        self.insert(format!("{name}/g"), Tensor::ones(&[width]));
        self.insert(format!("{name}/b"), Tensor::zeros(&[width]));
    }
}

/// Graph handles for the parameters of one forward pass.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Adds every parameter to `g`; names accepted by `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn new<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| CoreError::Config(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
