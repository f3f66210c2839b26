//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the backward pass. `Tape::backward` walks the nodes in exact reverse
//! execution order and accumulates gradients into every reachable leaf.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::kernels::{self, Activation, PoolMode, BN_MOMENTUM};
use crate::tensor::{shape_err, Float, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Float> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    pub(crate) fn update(&mut self, batch_mean: &[T], batch_var: &[T]) {
        let m = T::lit(BN_MOMENTUM);
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = (T::one() - m) * *r + m * b;
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Depthwise { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    MaxPool { x: Var, arg: Vec<usize> },
    AvgPool { x: Var, k: usize, stride: usize, pad: usize },
    GlobalPool { x: Var, mode: PoolMode, arg: Vec<usize> },
    ChannelPool { x: Var, mode: PoolMode, arg: Vec<usize> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Act { x: Var, kind: Activation },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Binary { a: Var, b: Var, op: BinaryOp },
    Concat { parts: Vec<Var> },
    Reshape { x: Var },
    Sum { x: Var },
    SoftmaxCe { logits: Var, probs: Vec<T>, labels: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed ops.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    /// A recording tape; `backward` is available.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape that only evaluates values. `backward` is a usage error.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, what: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::Numeric(format!("{what} produced a non-finite value")));
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_finite(&self, what: &str, vars: &[Var]) -> Result<()> {
        for v in vars {
            if !self.nodes[v.0].value.is_finite() {
                return Err(TensorError::Numeric(format!("{what}: non-finite input")));
            }
        }
        Ok(())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.check_finite("conv2d", &[x, w])?;
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", out, Op::Conv2d { x, w, b, stride, pad }, &inputs)
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.check_finite("depthwise_conv2d", &[x, w])?;
        let out = kernels::depthwise_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("depthwise_conv2d", out, Op::Depthwise { x, w, b, stride, pad }, &inputs)
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (out, arg) = kernels::max_pool2d_forward(self.value(x), k, stride)?;
        self.push("max_pool2d", out, Op::MaxPool { x, arg }, &[x])
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::avg_pool2d_forward(self.value(x), k, stride, pad)?;
        self.push("avg_pool2d", out, Op::AvgPool { x, k, stride, pad }, &[x])
    }

    pub fn global_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let (out, arg) = kernels::global_pool_forward(self.value(x), mode)?;
        self.push("global_pool", out, Op::GlobalPool { x, mode, arg }, &[x])
    }

    pub fn channel_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let (out, arg) = kernels::channel_pool_forward(self.value(x), mode)?;
        self.push("channel_pool", out, Op::ChannelPool { x, mode, arg }, &[x])
    }

    /// `y = x Wᵀ + b` for `x: (N, Din)`, `W: (Dout, Din)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check_finite("linear", &[x, w])?;
        let shape = kernels::linear_shape(self.shape(x), self.shape(w), b.map(|b| self.shape(b)))?;
        let (n, din, dout) = (shape[0], self.shape(x)[1], shape[1]);
        let mut out = vec![T::zero(); n * dout];
        crate::tensor::gemm(n, din, dout, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", out, Op::Linear { x, w, b }, &inputs)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = match kind {
            Activation::Relu => self.value(x).map(|v| if v > T::zero() { v } else { T::zero() }),
            Activation::Sigmoid => self.value(x).map(sigmoid),
        };
        self.push("activation", out, Op::Act { x, kind }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Batch normalization over `(N, H, W)` per channel. In `Train` mode batch
    /// statistics are used and `stats` is updated in place.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let c = kernels::batch_norm_shape(self.shape(x), self.shape(gamma), self.shape(beta))?[1];
        if stats.mean.len() != c || stats.var.len() != c {
            return shape_err(format!("batch_norm2d: running stats do not cover {c} channels"));
        }
        match mode {
            Mode::Train => {
                let (out, saved) = kernels::batch_norm_train(self.value(x), self.value(gamma), self.value(beta))?;
                stats.update(&saved.batch_mean, &saved.batch_var_unbiased);
                let op = Op::BatchNorm { x, gamma, beta, xhat: saved.xhat, inv_std: saved.inv_std, train: true };
                self.push("batch_norm2d", out, op, &[x, gamma, beta])
            }
            Mode::Eval => {
                let (out, inv_std) = kernels::batch_norm_eval(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    &stats.mean,
                    &stats.var,
                )?;
                let (_, _, h, w) = self.value(x).dims4()?;
                let hw = h * w;
                let xhat = if self.grad_enabled {
                    let xd = self.value(x).data();
                    (0..xd.len()).map(|i| {
                        let ci = (i / hw) % c;
                        (xd[i] - stats.mean[ci]) * inv_std[ci]
                    }).collect()
                } else {
                    Vec::new()
                };
                let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: false };
                self.push("batch_norm2d", out, op, &[x, gamma, beta])
            }
        }
    }

    /// Elementwise `a op b` where `b` broadcasts to `a`.
    pub fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let shape = kernels::broadcast_shape(self.shape(a), self.shape(b))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); ad.len()];
        if self.shape(a) == self.shape(b) {
            for ((o, &x), &y) in out.iter_mut().zip(ad).zip(bd) {
                *o = apply(op, x, y);
            }
        } else {
            kernels::for_each_broadcast(self.shape(a), self.shape(b), |i, j| out[i] = apply(op, ad[i], bd[j]));
        }
        let out = Tensor::new(shape, out)?;
        self.push("binary", out, Op::Binary { a, b, op }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    /// Concatenate along axis 1 (channels).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
        let shape = kernels::concat_shape(&shapes)?;
        let outer = shape[0];
        let mut out = Vec::with_capacity(shape.iter().product());
        for ni in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.len() / outer;
                out.extend_from_slice(&v.data()[ni * chunk..(ni + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push("concat", out, Op::Concat { parts: parts.to_vec() }, parts)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape { x }, &[x])
    }

    /// Flatten `(N, ...)` to `(N, rest)`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return shape_err("flatten of a scalar");
        }
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum { x }, &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let [n, k] = s[..] else {
            return shape_err(format!("softmax_cross_entropy expects (N, K) logits, got {s:?}"));
        };
        if labels.len() != n {
            return shape_err(format!("{} labels for a batch of {n}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Usage(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax_rows(self.value(logits).data(), k);
        let mut loss = T::zero();
        let ld = self.value(logits).data();
        for (i, &l) in labels.iter().enumerate() {
            let row = &ld[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            loss += lse - row[l];
        }
        let out = Tensor::scalar(loss / T::lit(n as f64));
        self.push(
            "softmax_cross_entropy",
            out,
            Op::SoftmaxCe { logits, probs, labels: labels.to_vec() },
            &[logits],
        )
    }

    /// Fingerprint of every piecewise-linear decision on the tape (ReLU signs
    /// and max-pool winners). Two evaluations with equal signatures lie in the
    /// same smooth region.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Act { x, kind: Activation::Relu } => {
                    for &v in self.nodes[x.0].value.data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { arg, .. } => arg.hash(&mut h),
                Op::GlobalPool { arg, mode: PoolMode::Max, .. } => arg.hash(&mut h),
                Op::ChannelPool { arg, mode: PoolMode::Max, .. } => arg.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Grads<T>> {
        if !self.grad_enabled {
            return Err(TensorError::Usage("backward called on a tape that does not record gradients".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            // leaves keep their grads; interior grads are dropped once used
        }
        Ok(Grads { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>| accumulate(grads, v, t);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let cg = kernels::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, self.wants(*x))?;
                if let Some(dx) = cg.dx {
                    acc(grads, *x, dx);
                }
                if self.wants(*w) {
                    acc(grads, *w, cg.dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        acc(grads, *b, cg.db);
                    }
                }
            }
            Op::Depthwise { x, w, b, stride, pad } => {
                let cg = kernels::depthwise_backward(self.value(*x), self.value(*w), g, *stride, *pad)?;
                if self.wants(*x) {
                    acc(grads, *x, cg.dx.expect("depthwise dx"));
                }
                if self.wants(*w) {
                    acc(grads, *w, cg.dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        acc(grads, *b, cg.db);
                    }
                }
            }
            Op::MaxPool { x, arg } | Op::GlobalPool { x, arg, mode: PoolMode::Max }
            | Op::ChannelPool { x, arg, mode: PoolMode::Max } => {
                let mut dx = Tensor::zeros(self.shape(*x).to_vec());
                let d = dx.data_mut();
                for (&i, &gv) in arg.iter().zip(g.data()) {
                    d[i] += gv;
                }
                acc(grads, *x, dx);
            }
            Op::AvgPool { x, k, stride, pad } => {
                let dx = kernels::avg_pool2d_backward(self.shape(*x), g, *k, *stride, *pad)?;
                acc(grads, *x, dx);
            }
            Op::GlobalPool { x, mode: PoolMode::Avg, .. } => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let inv = T::one() / T::lit(hw as f64);
                let dx = Tensor::from_fn(self.shape(*x).to_vec(), |i| g.data()[i / hw] * inv);
                acc(grads, *x, dx);
            }
            Op::ChannelPool { x, mode: PoolMode::Avg, .. } => {
                let (_, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let inv = T::one() / T::lit(c as f64);
                let dx = Tensor::from_fn(self.shape(*x).to_vec(), |i| {
                    let ni = i / (c * hw);
                    g.data()[ni * hw + i % hw] * inv
                });
                acc(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = self.shape(*w)[0];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    crate::tensor::gemm(n, dout, din, g.data(), false, self.value(*w).data(), false, &mut dx, false);
                    acc(grads, *x, Tensor::new([n, din], dx)?);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    crate::tensor::gemm(dout, n, din, g.data(), true, self.value(*x).data(), false, &mut dw, false);
                    acc(grads, *w, Tensor::new([dout, din], dw)?);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); dout];
                        for row in g.data().chunks(dout) {
                            for (d, &gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                        acc(grads, *b, Tensor::new([dout], db)?);
                    }
                }
            }
            Op::Act { x, kind } => {
                let dx = match kind {
                    Activation::Relu => {
                        let xd = self.value(*x).data();
                        Tensor::from_fn(g.shape().to_vec(), |i| if xd[i] > T::zero() { g.data()[i] } else { T::zero() })
                    }
                    Activation::Sigmoid => {
                        let yd = node.value.data();
                        Tensor::from_fn(g.shape().to_vec(), |i| g.data()[i] * yd[i] * (T::one() - yd[i]))
                    }
                };
                acc(grads, *x, dx);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let m = T::lit((n * hw) as f64);
                let gd = g.data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for i in 0..gd.len() {
                    let ci = (i / hw) % c;
                    sum_g[ci] += gd[i];
                    sum_gx[ci] += gd[i] * xhat[i];
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let dx = Tensor::from_fn(g.shape().to_vec(), |i| {
                        let ci = (i / hw) % c;
                        let scale = gam[ci] * inv_std[ci];
                        if *train {
                            scale * (gd[i] - sum_g[ci] / m - xhat[i] * sum_gx[ci] / m)
                        } else {
                            scale * gd[i]
                        }
                    });
                    acc(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    acc(grads, *gamma, Tensor::new([c], sum_gx)?);
                }
                if self.wants(*beta) {
                    acc(grads, *beta, Tensor::new([c], sum_g)?);
                }
            }
            Op::Binary { a, b, op } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let same = av.shape() == bv.shape();
                if self.wants(*a) {
                    let da = match op {
                        BinaryOp::Add => g.clone(),
                        BinaryOp::Mul if same => Tensor::from_fn(g.shape().to_vec(), |i| g.data()[i] * bv.data()[i]),
                        BinaryOp::Mul => {
                            let mut d = vec![T::zero(); g.len()];
                            kernels::for_each_broadcast(av.shape(), bv.shape(), |i, j| d[i] = g.data()[i] * bv.data()[j]);
                            Tensor::new(g.shape().to_vec(), d)?
                        }
                    };
                    acc(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); bv.len()];
                    match op {
                        BinaryOp::Add => kernels::for_each_broadcast(av.shape(), bv.shape(), |i, j| db[j] += g.data()[i]),
                        BinaryOp::Mul => kernels::for_each_broadcast(av.shape(), bv.shape(), |i, j| {
                            db[j] += g.data()[i] * av.data()[i]
                        }),
                    }
                    acc(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Concat { parts } => {
                let outer = g.shape()[0];
                let chunk_out = g.len() / outer;
                let mut offset = 0;
                for &p in parts {
                    let plen = self.value(p).len() / outer;
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(plen * outer);
                        for ni in 0..outer {
                            let start = ni * chunk_out + offset;
                            d.extend_from_slice(&g.data()[start..start + plen]);
                        }
                        acc(grads, p, Tensor::new(self.shape(p).to_vec(), d)?);
                    }
                    offset += plen;
                }
            }
            Op::Reshape { x } => acc(grads, *x, g.reshape(self.shape(*x).to_vec())?),
            Op::Sum { x } => acc(grads, *x, Tensor::full(self.shape(*x).to_vec(), g.item())),
            Op::SoftmaxCe { logits, probs, labels } => {
                let k = self.shape(*logits)[1];
                let scale = g.item() / T::lit(labels.len() as f64);
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                acc(grads, *logits, Tensor::new(self.shape(*logits).to_vec(), d)?);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot => *slot = Some(t),
    }
}

fn apply<T: Float>(op: BinaryOp, a: T, b: T) -> T {
    match op {
        BinaryOp::Add => a + b,
        BinaryOp::Mul => a * b,
    }
}

pub fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax, stabilized by subtracting the row max.
pub fn softmax_rows<T: Float>(data: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / s));
    }
    out
}
