use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionBlock;
use crate::exec::Exec;
use crate::param::{kaiming_uniform, BufferId, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Float, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub depthwise: bool,
}

impl Conv {
    pub fn run<T: Float, E: Exec<T>>(&self, e: &mut E, x: &E::V) -> Result<E::V> {
        if self.depthwise {
            e.depthwise_conv2d(x, self.w, self.b, self.stride, self.pad)
        } else {
            e.conv2d(x, self.w, self.b, self.stride, self.pad)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Bn {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BufferId,
}

impl Bn {
    pub fn run<T: Float, E: Exec<T>>(&self, e: &mut E, x: &E::V) -> Result<E::V> {
        e.batch_norm(x, self.gamma, self.beta, self.stats)
    }
}

/// conv → BN → optional ReLU.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConvBn {
    pub conv: Conv,
    pub bn: Bn,
    pub relu: bool,
}

impl ConvBn {
    pub fn run<T: Float, E: Exec<T>>(&self, e: &mut E, x: &E::V) -> Result<E::V> {
        let y = self.conv.run(e, x)?;
        let y = self.bn.run(e, &y)?;
        if self.relu {
            e.relu(&y)
        } else {
            Ok(y)
        }
    }
}

/// BN → ReLU → conv (pre-activation ordering).
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BnReluConv {
    pub bn: Bn,
    pub conv: Conv,
}

impl BnReluConv {
    pub fn run<T: Float, E: Exec<T>>(&self, e: &mut E, x: &E::V) -> Result<E::V> {
        let y = self.bn.run(e, x)?;
        let y = e.relu(&y)?;
        self.conv.run(e, &y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn run<T: Float, E: Exec<T>>(&self, e: &mut E, x: &E::V) -> Result<E::V> {
        e.linear(x, self.w, Some(self.b))
    }
}

/// Allocates backbone parameters in a fixed order from a seeded stream.
pub(crate) struct Builder<'a, T: Float> {
    pub store: &'a mut ParamStore<T>,
    pub rng: ChaCha8Rng,
}

impl<T: Float> Builder<'_, T> {
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Result<Conv> {
        let w = self.store.add(
            format!("{name}.w"),
            ParamGroup::Backbone,
            kaiming_uniform(&[cout, cin, k, k], cin * k * k, &mut self.rng),
        )?;
        let b = if bias {
            Some(self.store.add(format!("{name}.b"), ParamGroup::Backbone, Tensor::zeros([cout]))?)
        } else {
            None
        };
        Ok(Conv { w, b, stride, pad, depthwise: false })
    }

    pub fn depthwise(&mut self, name: &str, c: usize, k: usize, stride: usize, pad: usize) -> Result<Conv> {
        let w = self.store.add(
            format!("{name}.w"),
            ParamGroup::Backbone,
            kaiming_uniform(&[c, 1, k, k], k * k, &mut self.rng),
        )?;
        Ok(Conv { w, b: None, stride, pad, depthwise: true })
    }

    pub fn bn(&mut self, name: &str, c: usize) -> Result<Bn> {
        let gamma = self.store.add(format!("{name}.gamma"), ParamGroup::Backbone, Tensor::ones([c]))?;
        let beta = self.store.add(format!("{name}.beta"), ParamGroup::Backbone, Tensor::zeros([c]))?;
        let stats = self.store.add_buffer(format!("{name}.running"), c);
        Ok(Bn { gamma, beta, stats })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, relu: bool) -> Result<ConvBn> {
        let conv = self.conv(&format!("{name}.conv"), cin, cout, k, stride, pad, false)?;
        let bn = self.bn(&format!("{name}.bn"), cout)?;
        Ok(ConvBn { conv, bn, relu })
    }

    pub fn dw_bn(&mut self, name: &str, c: usize, k: usize, stride: usize) -> Result<ConvBn> {
        let conv = self.depthwise(&format!("{name}.conv"), c, k, stride, k / 2)?;
        let bn = self.bn(&format!("{name}.bn"), c)?;
        Ok(ConvBn { conv, bn, relu: true })
    }

    pub fn bn_relu_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<BnReluConv> {
        let bn = self.bn(&format!("{name}.bn"), cin)?;
        let conv = self.conv(&format!("{name}.conv"), cin, cout, k, 1, k / 2, false)?;
        Ok(BnReluConv { bn, conv })
    }

    pub fn dense(&mut self, name: &str, din: usize, dout: usize) -> Result<Dense> {
        let w = self.store.add(
            format!("{name}.w"),
            ParamGroup::Backbone,
            kaiming_uniform(&[dout, din], din, &mut self.rng),
        )?;
        let b = self.store.add(format!("{name}.b"), ParamGroup::Backbone, Tensor::zeros([dout]))?;
        Ok(Dense { w, b })
    }
}

/// Attention blocks spliced in at hook points, in plan order per hook.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct Attachments {
    pub by_hook: HashMap<String, Vec<AttentionBlock>>,
}

impl Attachments {
    /// Run every block attached at `name` in sequence.
    pub fn apply<T: Float, E: Exec<T>>(&self, e: &mut E, name: &str, x: E::V) -> Result<E::V> {
        e.on_hook(name, &x);
        let Some(blocks) = self.by_hook.get(name) else {
            return Ok(x);
        };
        let mut x = x;
        for block in blocks {
            let y = block.forward(e, &x)?;
            e.on_attention(name, block.kind(), &x, &y);
            x = y;
        }
        Ok(x)
    }
}
