use std::collections::BTreeMap;

use rand::Rng as _;

use super::graph::{Graph, Gradients, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/√fan_in`.
    FanIn(usize),
    Zeros,
    Ones,
}

/// Named parameter tensors in a stable (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect(),
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors.values().map(Tensor::sq_norm).sum()
    }

    /// Flat view of every parameter in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.tensors.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::shape(format!(
                "parameter count {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.tensors.iter().zip(&other.tensors) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::shape(format!("parameter {na} {:?} vs {nb} {:?}", ta.shape(), tb.shape())));
            }
        }
        Ok(())
    }
}

/// Supplies parameter nodes to a network builder.
pub trait ParamSource {
    fn param(&mut self, g: &mut Graph, name: &str, shape: &[usize], init: Init) -> Result<Var>;
}

/// Draws fresh parameters and records them into a store.
pub struct Initializer<'a> {
    pub store: ParamStore,
    rng: &'a mut Rng,
}

impl<'a> Initializer<'a> {
    pub fn new(rng: &'a mut Rng) -> Self {
        Self {
            store: ParamStore::new(),
            rng,
        }
    }
}

impl ParamSource for Initializer<'_> {
    fn param(&mut self, g: &mut Graph, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn(fan) => {
                let bound = 1.0 / (fan.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::new(shape.to_vec(), data)?;
        self.store.insert(name, t.clone())?;
        Ok(g.constant(t))
    }
}

/// Binds existing parameters as graph nodes.
pub struct Binder<'a> {
    store: &'a ParamStore,
    track: bool,
    bound: Vec<(String, Var)>,
}

impl<'a> Binder<'a> {
    /// With `track`, parameters are variables and receive gradients.
    pub fn new(store: &'a ParamStore, track: bool) -> Self {
        Self {
            store,
            track,
            bound: Vec::new(),
        }
    }

    /// Collects each bound parameter's gradient under its name.
    pub fn gradients(&self, grads: &mut Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, v) in &self.bound {
            out.tensors.insert(name.clone(), grads.take(*v));
        }
        out
    }

    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }
}

impl ParamSource for Binder<'_> {
    fn param(&mut self, g: &mut Graph, name: &str, shape: &[usize], _init: Init) -> Result<Var> {
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
        if t.shape() != shape {
            return Err(Error::shape(format!("parameter {name} has shape {:?}, expected {shape:?}", t.shape())));
        }
        let v = if self.track {
            g.variable(t.clone())
        } else {
            g.constant(t.clone())
        };
        self.bound.push((name.to_string(), v));
        Ok(v)
    }
}
