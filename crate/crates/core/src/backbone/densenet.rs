//! Four dense blocks joined by three transitions (BN-ReLU 1x1 conv, 2x2
//! average pool). Each dense layer's output is concatenated onto its input.

use super::layers::{Attachments, BnReluConv, Bn, Builder, ConvBn, Dense};
use super::Scale;
use crate::exec::Exec;
use crate::kernels::PoolMode;
use crate::tensor::{Float, Result};

pub(crate) struct DenseNetLayout {
    pub stem: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_pool: bool,
    pub growth: usize,
    pub layers: [usize; 4],
    /// 1x1 bottleneck of width `bottleneck * growth` before each 3x3 conv.
    pub bottleneck: Option<usize>,
}

pub(crate) fn layout(scale: Scale) -> DenseNetLayout {
    match scale {
        Scale::Paper => DenseNetLayout {
            stem: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            growth: 32,
            layers: [6, 12, 24, 16],
            bottleneck: Some(4),
        },
        Scale::Toy => DenseNetLayout {
            stem: 16,
            stem_kernel: 3,
            stem_stride: 1,
            stem_pool: false,
            growth: 8,
            layers: [2, 2, 2, 2],
            bottleneck: None,
        },
    }
}

pub(crate) fn hook_names(_l: &DenseNetLayout) -> Vec<String> {
    let mut out = Vec::new();
    for i in 1..=4 {
        out.push(format!("dense{i}.end"));
        if i < 4 {
            out.push(format!("trans{i}.end"));
        }
    }
    out.push("pre_gap".into());
    out
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DenseLayer {
    convs: Vec<BnReluConv>,
}

impl DenseLayer {
    fn run<T: Float, E: Exec<T>>(&self, e: &mut E, x: &E::V) -> Result<E::V> {
        let mut y = x.clone();
        for c in &self.convs {
            y = c.run(e, &y)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DenseBlock {
    pub(crate) layers: Vec<DenseLayer>,
}

impl DenseBlock {
    pub(crate) fn build<T: Float>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        growth: usize,
        n: usize,
        bottleneck: Option<usize>,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut c = cin;
        for j in 1..=n {
            let lname = format!("{name}.layer{j}");
            let convs = match bottleneck {
                Some(f) => vec![
                    b.bn_relu_conv(&format!("{lname}.reduce"), c, f * growth, 1)?,
                    b.bn_relu_conv(&format!("{lname}.conv"), f * growth, growth, 3)?,
                ],
                None => vec![b.bn_relu_conv(&lname, c, growth, 3)?],
            };
            layers.push(DenseLayer { convs });
            c += growth;
        }
        Ok(Self { layers })
    }

    pub(crate) fn run<T: Float, E: Exec<T>>(&self, e: &mut E, x: &E::V) -> Result<E::V> {
        let mut feats = x.clone();
        for layer in &self.layers {
            let new = layer.run(e, &feats)?;
            feats = e.concat(&[feats, new])?;
        }
        Ok(feats)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DenseNet {
    stem: ConvBn,
    stem_pool: bool,
    blocks: Vec<DenseBlock>,
    transitions: Vec<BnReluConv>,
    final_bn: Bn,
    fc: Dense,
}

impl DenseNet {
    pub fn build<T: Float>(b: &mut Builder<'_, T>, l: &DenseNetLayout, num_classes: usize) -> Result<Self> {
        let stem = b.conv_bn("stem", 3, l.stem, l.stem_kernel, l.stem_stride, l.stem_kernel / 2, true)?;
        let mut c = l.stem;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (i, &n) in l.layers.iter().enumerate() {
            blocks.push(DenseBlock::build(b, &format!("dense{}", i + 1), c, l.growth, n, l.bottleneck)?);
            c += n * l.growth;
            if i < 3 {
                let out = c / 2;
                transitions.push(b.bn_relu_conv(&format!("trans{}", i + 1), c, out, 1)?);
                c = out;
            }
        }
        let final_bn = b.bn("final.bn", c)?;
        let fc = b.dense("fc", c, num_classes)?;
        Ok(Self { stem, stem_pool: l.stem_pool, blocks, transitions, final_bn, fc })
    }

    pub fn run<T: Float, E: Exec<T>>(&self, e: &mut E, att: &Attachments, x: E::V) -> Result<E::V> {
        let mut x = self.stem.run(e, &x)?;
        if self.stem_pool {
            x = e.max_pool2d(&x, 2, 2)?;
        }
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.run(e, &x)?;
            x = att.apply(e, &format!("dense{}.end", i + 1), x)?;
            if let Some(t) = self.transitions.get(i) {
                x = t.run(e, &x)?;
                x = e.avg_pool2d(&x, 2, 2, 0)?;
                x = att.apply(e, &format!("trans{}.end", i + 1), x)?;
            }
        }
        x = self.final_bn.run(e, &x)?;
        x = e.relu(&x)?;
        x = att.apply(e, "pre_gap", x)?;
        let x = e.global_pool(&x, PoolMode::Avg)?;
        let x = e.flatten(&x)?;
        self.fc.run(e, &x)
    }
}
