//! Stem conv and five stages of MBConv blocks (1x1 expand, 3x3 depthwise,
//! 1x1 project, residual when shapes match). ReLU stands in for SiLU.

use super::layers::{Attachments, Builder, ConvBn, Dense};
use super::Scale;
use crate::exec::Exec;
use crate::kernels::PoolMode;
use crate::tensor::{Float, Result};

pub(crate) struct Stage {
    pub out: usize,
    pub blocks: usize,
    pub stride: usize,
    pub expand: usize,
}

pub(crate) struct EfficientNetLayout {
    pub stem: usize,
    pub stem_stride: usize,
    pub stages: [Stage; 5],
}

const fn st(out: usize, blocks: usize, stride: usize, expand: usize) -> Stage {
    Stage { out, blocks, stride, expand }
}

pub(crate) fn layout(scale: Scale) -> EfficientNetLayout {
    match scale {
        Scale::Paper => EfficientNetLayout {
            stem: 32,
            stem_stride: 2,
            stages: [st(24, 2, 2, 1), st(40, 3, 2, 6), st(80, 3, 2, 6), st(128, 4, 2, 6), st(176, 2, 1, 6)],
        },
        Scale::Toy => EfficientNetLayout {
            stem: 8,
            stem_stride: 1,
            stages: [st(6, 2, 1, 1), st(10, 2, 2, 4), st(20, 2, 2, 4), st(32, 2, 2, 4), st(44, 2, 1, 4)],
        },
    }
}

pub(crate) fn hook_names(l: &EfficientNetLayout) -> Vec<String> {
    let mut out = Vec::new();
    for (i, s) in l.stages.iter().enumerate() {
        for j in 1..=s.blocks {
            out.push(format!("stage{}.mbconv{j}.post_dw", i + 1));
        }
        out.push(format!("stage{}.end", i + 1));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct MbConv {
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    project: ConvBn,
    residual: bool,
}

impl MbConv {
    fn build<T: Float>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, stride: usize, expand: usize) -> Result<Self> {
        let mid = cin * expand;
        let expand_conv = if expand != 1 {
            Some(b.conv_bn(&format!("{name}.expand"), cin, mid, 1, 1, 0, true)?)
        } else {
            None
        };
        Ok(Self {
            expand: expand_conv,
            depthwise: b.dw_bn(&format!("{name}.dw"), mid, 3, stride)?,
            project: b.conv_bn(&format!("{name}.project"), mid, cout, 1, 1, 0, false)?,
            residual: stride == 1 && cin == cout,
        })
    }

    fn run<T: Float, E: Exec<T>>(&self, e: &mut E, att: &Attachments, post_dw: &str, x: &E::V) -> Result<E::V> {
        let mut h = match &self.expand {
            Some(c) => c.run(e, x)?,
            None => x.clone(),
        };
        h = self.depthwise.run(e, &h)?;
        h = att.apply(e, post_dw, h)?;
        h = self.project.run(e, &h)?;
        if self.residual {
            h = e.add(&h, x)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EfficientNet {
    stem: ConvBn,
    stages: Vec<Vec<MbConv>>,
    fc: Dense,
}

impl EfficientNet {
    pub fn build<T: Float>(b: &mut Builder<'_, T>, l: &EfficientNetLayout, num_classes: usize) -> Result<Self> {
        let stem = b.conv_bn("stem", 3, l.stem, 3, l.stem_stride, 1, true)?;
        let mut cin = l.stem;
        let mut stages = Vec::new();
        for (i, s) in l.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            for j in 1..=s.blocks {
                let stride = if j == 1 { s.stride } else { 1 };
                blocks.push(MbConv::build(b, &format!("stage{}.mbconv{j}", i + 1), cin, s.out, stride, s.expand)?);
                cin = s.out;
            }
            stages.push(blocks);
        }
        let fc = b.dense("fc", cin, num_classes)?;
        Ok(Self { stem, stages, fc })
    }

    pub fn run<T: Float, E: Exec<T>>(&self, e: &mut E, att: &Attachments, x: E::V) -> Result<E::V> {
        let mut x = self.stem.run(e, &x)?;
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.iter().enumerate() {
                x = block.run(e, att, &format!("stage{}.mbconv{}.post_dw", i + 1, j + 1), &x)?;
            }
            x = att.apply(e, &format!("stage{}.end", i + 1), x)?;
        }
        let x = e.global_pool(&x, PoolMode::Avg)?;
        let x = e.flatten(&x)?;
        self.fc.run(e, &x)
    }
}
