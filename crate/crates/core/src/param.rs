//! Named, grouped trainable parameters and batch-norm buffers.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::RunningStats;
use crate::tensor::{Float, Result, Tensor, TensorError};

/// Which optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

impl<T: Float> Param<T> {
    pub fn accumulate_grad(&mut self, g: &Tensor<T>) {
        match &mut self.grad {
            Some(existing) => existing.add_assign(g),
            None => self.grad = Some(g.clone()),
        }
    }
}

/// Registry of every parameter and buffer in a model. Names are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<(String, RunningStats<T>)>,
    names: BTreeMap<String, ParamId>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), buffers: Vec::new(), names: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains_key(&name) || self.buffers.iter().any(|(n, _)| *n == name) {
            return Err(TensorError::Usage(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.names.insert(name.clone(), id);
        self.params.push(Param { name, group, value, grad: None });
        Ok(id)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, channels: usize) -> BufferId {
        self.buffers.push((name.into(), RunningStats::new(channels)));
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.names.get(name).map(|&id| &self.params[id.0])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied()
    }

    pub fn buffer(&self, id: BufferId) -> &RunningStats<T> {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut RunningStats<T> {
        &mut self.buffers[id.0].1
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &RunningStats<T>)> {
        self.buffers.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = (&str, &mut RunningStats<T>)> {
        self.buffers.iter_mut().map(|(n, s)| (n.as_str(), s))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Scalar parameter count, optionally restricted to one group.
    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.map_or(true, |g| p.group == g))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(n, s)| {
                    let mean = s.mean.iter().map(|v| U::lit(v.as_f64())).collect();
                    let var = s.var.iter().map(|v| U::lit(v.as_f64())).collect();
                    (n.clone(), RunningStats { mean, var })
                })
                .collect(),
            names: self.names.clone(),
        }
    }
}

/// Kaiming-uniform initialization for a ReLU-followed layer:
/// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub(crate) fn kaiming_uniform<T: Float>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.gen_range(-bound..bound)))
}
