//! Stem conv, four layers of two BasicBlocks, global average pool, dense.

use super::layers::{Attachments, Builder, ConvBn, Dense};
use super::Scale;
use crate::exec::Exec;
use crate::kernels::PoolMode;
use crate::tensor::{Float, Result};

pub(crate) struct ResNetLayout {
    pub stem: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_pool: bool,
    pub widths: [usize; 4],
    pub blocks: [usize; 4],
}

pub(crate) fn layout(scale: Scale) -> ResNetLayout {
    match scale {
        Scale::Paper => ResNetLayout {
            stem: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            widths: [64, 128, 256, 512],
            blocks: [2, 2, 2, 2],
        },
        Scale::Toy => ResNetLayout {
            stem: 16,
            stem_kernel: 3,
            stem_stride: 1,
            stem_pool: false,
            widths: [16, 32, 64, 128],
            blocks: [2, 2, 2, 2],
        },
    }
}

pub(crate) fn hook_names(l: &ResNetLayout) -> Vec<String> {
    let mut out = Vec::new();
    for (i, &n) in l.blocks.iter().enumerate() {
        for j in 1..=n {
            out.push(format!("layer{}.block{j}.inner", i + 1));
        }
        out.push(format!("layer{}.end", i + 1));
    }
    out
}

/// Two 3x3 conv-BN pairs with an identity or 1x1 projection shortcut.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BasicBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub shortcut: Option<ConvBn>,
}

impl BasicBlock {
    pub fn build<T: Float>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let conv1 = b.conv_bn(&format!("{name}.conv1"), cin, cout, 3, stride, 1, true)?;
        let conv2 = b.conv_bn(&format!("{name}.conv2"), cout, cout, 3, 1, 1, false)?;
        let shortcut = if stride != 1 || cin != cout {
            Some(b.conv_bn(&format!("{name}.shortcut"), cin, cout, 1, stride, 0, false)?)
        } else {
            None
        };
        Ok(Self { conv1, conv2, shortcut })
    }

    /// `inner` names the hook between the residual branch and the add.
    pub fn run<T: Float, E: Exec<T>>(&self, e: &mut E, att: &Attachments, inner: &str, x: &E::V) -> Result<E::V> {
        let y = self.conv1.run(e, x)?;
        let y = self.conv2.run(e, &y)?;
        let y = att.apply(e, inner, y)?;
        let s = match &self.shortcut {
            Some(p) => p.run(e, x)?,
            None => x.clone(),
        };
        let sum = e.add(&y, &s)?;
        e.relu(&sum)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ResNet {
    stem: ConvBn,
    stem_pool: bool,
    layers: Vec<Vec<BasicBlock>>,
    fc: Dense,
}

impl ResNet {
    pub fn build<T: Float>(b: &mut Builder<'_, T>, l: &ResNetLayout, num_classes: usize) -> Result<Self> {
        let stem = b.conv_bn("stem", 3, l.stem, l.stem_kernel, l.stem_stride, l.stem_kernel / 2, true)?;
        let mut cin = l.stem;
        let mut layers = Vec::new();
        for (i, (&w, &n)) in l.widths.iter().zip(&l.blocks).enumerate() {
            let mut blocks = Vec::new();
            for j in 1..=n {
                let stride = if i > 0 && j == 1 { 2 } else { 1 };
                blocks.push(BasicBlock::build(b, &format!("layer{}.block{j}", i + 1), cin, w, stride)?);
                cin = w;
            }
            layers.push(blocks);
        }
        let fc = b.dense("fc", cin, num_classes)?;
        Ok(Self { stem, stem_pool: l.stem_pool, layers, fc })
    }

    pub fn run<T: Float, E: Exec<T>>(&self, e: &mut E, att: &Attachments, x: E::V) -> Result<E::V> {
        let mut x = self.stem.run(e, &x)?;
        if self.stem_pool {
            x = e.max_pool2d(&x, 2, 2)?;
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for (j, block) in layer.iter().enumerate() {
                x = block.run(e, att, &format!("layer{}.block{}.inner", i + 1, j + 1), &x)?;
            }
            x = att.apply(e, &format!("layer{}.end", i + 1), x)?;
        }
        let x = e.global_pool(&x, PoolMode::Avg)?;
        let x = e.flatten(&x)?;
        self.fc.run(e, &x)
    }
}
