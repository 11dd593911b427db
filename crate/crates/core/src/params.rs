//! Named parameter sets and their binding into a [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered map from parameter name to value.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<S> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for Params<S> {
    fn default() -> Self {
        Params { map: BTreeMap::new() }
    }
}

impl<S: Scalar> Params<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<S>> {
        self.map.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Params<T> {
        Params { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// `self += other * alpha` for every name present in both.
    pub fn add_scaled(&mut self, other: &Params<S>, alpha: S) {
        for (name, t) in self.map.iter_mut() {
            if let Some(o) = other.map.get(name) {
                for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                    *a += *b * alpha;
                }
            }
        }
    }

    pub fn scale(&mut self, alpha: S) {
        for t in self.map.values_mut() {
            for a in t.data_mut() {
                *a *= alpha;
            }
        }
    }

    /// Checks that every name in `expected` exists with the given shape.
    pub fn check_shapes(&self, expected: &Params<S>) -> Result<()> {
        for (name, t) in expected.iter() {
            let have = self.get(name)?;
            if have.shape() != t.shape() {
                return Err(Error::dim(
                    name,
                    format!("expected shape {:?}, found {:?}", t.shape(), have.shape()),
                ));
            }
        }
        Ok(())
    }
}

/// Graph handles for a bound [`Params`] set.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Copies every parameter into `g` as a leaf.
    pub fn bind<S: Scalar>(g: &mut Graph<S>, params: &Params<S>, trainable: bool) -> Bound {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (name.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` is not bound")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradients of every bound parameter after `g.backward`, zero where unreached.
    pub fn grads<S: Scalar>(&self, g: &Graph<S>) -> Params<S> {
        let mut out = Params::new();
        for (name, v) in &self.vars {
            out.insert(name.clone(), g.grad_tensor(*v));
        }
        out
    }
}

/// Seeded parameter initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: crate::seed::rng(seed) }
    }

    pub fn normal<S: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<S> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape.to_vec(), |_| S::lit(dist.sample(&mut self.rng)))
    }

    pub fn uniform<S: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<S> {
        Tensor::from_fn(shape.to_vec(), |_| S::lit(self.rng.random_range(-bound..=bound)))
    }

    /// Truncated-free Xavier-uniform for a `[fan_out, fan_in]` matrix.
    pub fn xavier<S: Scalar>(&mut self, fan_out: usize, fan_in: usize) -> Tensor<S> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(&[fan_out, fan_in], bound)
    }
}
