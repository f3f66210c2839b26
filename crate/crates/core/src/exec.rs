//! Executors for model forward passes.
//!
//! Layers are written once against [`Exec`]. [`TapeExec`] evaluates them on a
//! gradient tape; [`ShapeExec`] propagates shapes only, which is how hook
//! channel counts and attention overhead are computed without running
//! full-size convolutions.

use std::collections::HashMap;

use crate::attention::AttentionKind;
use crate::autograd::{Mode, RunningStats, Tape, Var};
use crate::kernels::{self, Activation, PoolMode};
use crate::param::{BufferId, ParamId, ParamStore};
use crate::tensor::{Float, Result, Tensor};

pub trait Exec<T: Float> {
    type V: Clone;

    fn shape_of(&self, v: &Self::V) -> Vec<usize>;

    fn conv2d(&mut self, x: &Self::V, w: ParamId, b: Option<ParamId>, stride: usize, pad: usize) -> Result<Self::V>;
    fn depthwise_conv2d(&mut self, x: &Self::V, w: ParamId, b: Option<ParamId>, stride: usize, pad: usize)
        -> Result<Self::V>;
    fn batch_norm(&mut self, x: &Self::V, gamma: ParamId, beta: ParamId, stats: BufferId) -> Result<Self::V>;
    fn activation(&mut self, x: &Self::V, kind: Activation) -> Result<Self::V>;
    fn max_pool2d(&mut self, x: &Self::V, k: usize, stride: usize) -> Result<Self::V>;
    fn avg_pool2d(&mut self, x: &Self::V, k: usize, stride: usize, pad: usize) -> Result<Self::V>;
    fn global_pool(&mut self, x: &Self::V, mode: PoolMode) -> Result<Self::V>;
    fn channel_pool(&mut self, x: &Self::V, mode: PoolMode) -> Result<Self::V>;
    fn linear(&mut self, x: &Self::V, w: ParamId, b: Option<ParamId>) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn concat(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V>;

    fn relu(&mut self, x: &Self::V) -> Result<Self::V> {
        self.activation(x, Activation::Relu)
    }

    fn sigmoid(&mut self, x: &Self::V) -> Result<Self::V> {
        self.activation(x, Activation::Sigmoid)
    }

    fn flatten(&mut self, x: &Self::V) -> Result<Self::V> {
        let s = self.shape_of(x);
        let rest = s[1..].iter().product::<usize>();
        self.reshape(x, &[s[0], rest])
    }

    /// Called when execution reaches a hook point, before attachments run.
    fn on_hook(&mut self, _name: &str, _x: &Self::V) {}

    /// Called after each attention insertion with its input and output.
    fn on_attention(&mut self, _hook: &str, _kind: AttentionKind, _input: &Self::V, _output: &Self::V) {}
}

/// Input and output of one attention module, captured by an instrumented
/// forward pass.
#[derive(Debug, Clone)]
pub struct AttentionProbe<T> {
    pub hook: String,
    pub kind: AttentionKind,
    pub input: Tensor<T>,
    pub output: Tensor<T>,
}

/// Evaluates layers on a [`Tape`].
pub struct TapeExec<'a, T: Float> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    mode: Mode,
    bound: HashMap<ParamId, Var>,
    order: Vec<ParamId>,
    bn_updates: Vec<(BufferId, RunningStats<T>)>,
    probes: Option<Vec<AttentionProbe<T>>>,
    hook_shapes: Vec<(String, Vec<usize>)>,
}

/// Parameter leaves and pending batch-norm updates from a finished forward.
pub struct ForwardRecord<T> {
    pub bindings: Vec<(ParamId, Var)>,
    pub bn_updates: Vec<(BufferId, RunningStats<T>)>,
    pub probes: Vec<AttentionProbe<T>>,
    pub hook_shapes: Vec<(String, Vec<usize>)>,
}

impl<'a, T: Float> TapeExec<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            bound: HashMap::new(),
            order: Vec::new(),
            bn_updates: Vec::new(),
            probes: None,
            hook_shapes: Vec::new(),
        }
    }

    /// Record every attention insertion's input and output.
    pub fn with_probes(mut self) -> Self {
        self.probes = Some(Vec::new());
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).value.clone(), self.tape.grad_enabled());
        self.bound.insert(id, v);
        self.order.push(id);
        v
    }

    /// Use an existing tape variable for a parameter instead of a fresh leaf.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        if self.bound.insert(id, v).is_none() {
            self.order.push(id);
        }
    }

    pub fn finish(self) -> ForwardRecord<T> {
        ForwardRecord {
            bindings: self.order.iter().map(|id| (*id, self.bound[id])).collect(),
            bn_updates: self.bn_updates,
            probes: self.probes.unwrap_or_default(),
            hook_shapes: self.hook_shapes,
        }
    }
}

impl<T: Float> Exec<T> for TapeExec<'_, T> {
    type V = Var;

    fn shape_of(&self, v: &Var) -> Vec<usize> {
        self.tape.shape(*v).to_vec()
    }

    fn conv2d(&mut self, x: &Var, w: ParamId, b: Option<ParamId>, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(w);
        let b = b.map(|b| self.param(b));
        self.tape.conv2d(*x, w, b, stride, pad)
    }

    fn depthwise_conv2d(&mut self, x: &Var, w: ParamId, b: Option<ParamId>, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(w);
        let b = b.map(|b| self.param(b));
        self.tape.depthwise_conv2d(*x, w, b, stride, pad)
    }

    fn batch_norm(&mut self, x: &Var, gamma: ParamId, beta: ParamId, stats: BufferId) -> Result<Var> {
        let g = self.param(gamma);
        let b = self.param(beta);
        let mut running = self.store.buffer(stats).clone();
        let y = self.tape.batch_norm2d(*x, g, b, &mut running, self.mode)?;
        if self.mode == Mode::Train {
            self.bn_updates.push((stats, running));
        }
        Ok(y)
    }

    fn activation(&mut self, x: &Var, kind: Activation) -> Result<Var> {
        self.tape.activation(*x, kind)
    }

    fn max_pool2d(&mut self, x: &Var, k: usize, stride: usize) -> Result<Var> {
        self.tape.max_pool2d(*x, k, stride)
    }

    fn avg_pool2d(&mut self, x: &Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        self.tape.avg_pool2d(*x, k, stride, pad)
    }

    fn global_pool(&mut self, x: &Var, mode: PoolMode) -> Result<Var> {
        self.tape.global_pool(*x, mode)
    }

    fn channel_pool(&mut self, x: &Var, mode: PoolMode) -> Result<Var> {
        self.tape.channel_pool(*x, mode)
    }

    fn linear(&mut self, x: &Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let w = self.param(w);
        let b = b.map(|b| self.param(b));
        self.tape.linear(*x, w, b)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.mul(*a, *b)
    }

    fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.tape.concat(parts)
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        self.tape.reshape(*x, shape)
    }

    fn on_hook(&mut self, name: &str, x: &Var) {
        self.hook_shapes.push((name.to_string(), self.tape.shape(*x).to_vec()));
    }

    fn on_attention(&mut self, hook: &str, kind: AttentionKind, input: &Var, output: &Var) {
        if let Some(probes) = &mut self.probes {
            probes.push(AttentionProbe {
                hook: hook.to_string(),
                kind,
                input: self.tape.value(*input).clone(),
                output: self.tape.value(*output).clone(),
            });
        }
    }
}

/// One attention insertion seen by the shape executor.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSite {
    pub hook: String,
    pub kind: AttentionKind,
    pub input_shape: Vec<usize>,
}

/// Propagates shapes through the layers without touching data.
pub struct ShapeExec<'a, T: Float> {
    store: &'a ParamStore<T>,
    pub hooks: Vec<(String, Vec<usize>)>,
    pub attention: Vec<AttentionSite>,
}

impl<'a, T: Float> ShapeExec<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self { store, hooks: Vec::new(), attention: Vec::new() }
    }

    fn pshape(&self, id: ParamId) -> &[usize] {
        self.store.get(id).value.shape()
    }
}

impl<T: Float> Exec<T> for ShapeExec<'_, T> {
    type V = Vec<usize>;

    fn shape_of(&self, v: &Vec<usize>) -> Vec<usize> {
        v.clone()
    }

    fn conv2d(&mut self, x: &Vec<usize>, w: ParamId, b: Option<ParamId>, stride: usize, pad: usize) -> Result<Vec<usize>> {
        kernels::conv2d_shape(x, self.pshape(w), b.map(|b| self.pshape(b)), stride, pad)
    }

    fn depthwise_conv2d(&mut self, x: &Vec<usize>, w: ParamId, b: Option<ParamId>, stride: usize, pad: usize)
        -> Result<Vec<usize>> {
        kernels::depthwise_shape(x, self.pshape(w), b.map(|b| self.pshape(b)), stride, pad)
    }

    fn batch_norm(&mut self, x: &Vec<usize>, gamma: ParamId, beta: ParamId, _stats: BufferId) -> Result<Vec<usize>> {
        kernels::batch_norm_shape(x, self.pshape(gamma), self.pshape(beta))
    }

    fn activation(&mut self, x: &Vec<usize>, _kind: Activation) -> Result<Vec<usize>> {
        Ok(x.clone())
    }

    fn max_pool2d(&mut self, x: &Vec<usize>, k: usize, stride: usize) -> Result<Vec<usize>> {
        kernels::pool2d_shape(x, k, stride, 0)
    }

    fn avg_pool2d(&mut self, x: &Vec<usize>, k: usize, stride: usize, pad: usize) -> Result<Vec<usize>> {
        kernels::pool2d_shape(x, k, stride, pad)
    }

    fn global_pool(&mut self, x: &Vec<usize>, _mode: PoolMode) -> Result<Vec<usize>> {
        kernels::global_pool_shape(x)
    }

    fn channel_pool(&mut self, x: &Vec<usize>, _mode: PoolMode) -> Result<Vec<usize>> {
        kernels::channel_pool_shape(x)
    }

    fn linear(&mut self, x: &Vec<usize>, w: ParamId, b: Option<ParamId>) -> Result<Vec<usize>> {
        kernels::linear_shape(x, self.pshape(w), b.map(|b| self.pshape(b)))
    }

    fn add(&mut self, a: &Vec<usize>, b: &Vec<usize>) -> Result<Vec<usize>> {
        kernels::broadcast_shape(a, b)
    }

    fn mul(&mut self, a: &Vec<usize>, b: &Vec<usize>) -> Result<Vec<usize>> {
        kernels::broadcast_shape(a, b)
    }

    fn concat(&mut self, parts: &[Vec<usize>]) -> Result<Vec<usize>> {
        let refs: Vec<&[usize]> = parts.iter().map(Vec::as_slice).collect();
        kernels::concat_shape(&refs)
    }

    fn reshape(&mut self, x: &Vec<usize>, shape: &[usize]) -> Result<Vec<usize>> {
        if x.iter().product::<usize>() != shape.iter().product::<usize>() {
            return crate::tensor::shape_err(format!("cannot reshape {x:?} to {shape:?}"));
        }
        Ok(shape.to_vec())
    }

    fn on_hook(&mut self, name: &str, x: &Vec<usize>) {
        self.hooks.push((name.to_string(), x.clone()));
    }

    fn on_attention(&mut self, hook: &str, kind: AttentionKind, input: &Vec<usize>, _output: &Vec<usize>) {
        self.attention.push(AttentionSite { hook: hook.to_string(), kind, input_shape: input.clone() });
    }
}
