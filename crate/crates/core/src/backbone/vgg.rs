//! Five conv blocks, each ending in 2x2 max-pool, then flatten and two dense
//! layers.

use super::layers::{Attachments, Builder, ConvBn, Dense};
use super::Scale;
use crate::exec::Exec;
use crate::tensor::{Float, Result};

pub(crate) struct VggLayout {
    pub widths: [usize; 5],
    pub convs: [usize; 5],
    pub hidden: usize,
}

pub(crate) fn layout(scale: Scale) -> VggLayout {
    match scale {
        Scale::Paper => VggLayout { widths: [64, 128, 256, 512, 512], convs: [2, 2, 3, 3, 3], hidden: 512 },
        Scale::Toy => VggLayout { widths: [16, 32, 64, 128, 128], convs: [2, 2, 2, 2, 2], hidden: 128 },
    }
}

pub(crate) fn hook_names(l: &VggLayout) -> Vec<String> {
    let mut out = Vec::new();
    for (i, &n) in l.convs.iter().enumerate() {
        for j in 1..=n {
            out.push(format!("b{}.conv{j}", i + 1));
        }
        out.push(format!("b{}.last", i + 1));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Vgg {
    blocks: Vec<Vec<ConvBn>>,
    fc1: Dense,
    fc2: Dense,
}

impl Vgg {
    pub fn build<T: Float>(b: &mut Builder<'_, T>, l: &VggLayout, input_size: usize, num_classes: usize) -> Result<Self> {
        let mut cin = 3;
        let mut spatial = input_size;
        let mut blocks = Vec::new();
        for (i, (&w, &n)) in l.widths.iter().zip(&l.convs).enumerate() {
            let mut convs = Vec::new();
            for j in 1..=n {
                convs.push(b.conv_bn(&format!("b{}.conv{j}", i + 1), cin, w, 3, 1, 1, true)?);
                cin = w;
            }
            blocks.push(convs);
            spatial /= 2;
        }
        let flat = cin * spatial * spatial;
        let fc1 = b.dense("classifier.fc1", flat, l.hidden)?;
        let fc2 = b.dense("classifier.fc2", l.hidden, num_classes)?;
        Ok(Self { blocks, fc1, fc2 })
    }

    pub fn run<T: Float, E: Exec<T>>(&self, e: &mut E, att: &Attachments, x: E::V) -> Result<E::V> {
        let mut x = x;
        for (i, block) in self.blocks.iter().enumerate() {
            for (j, conv) in block.iter().enumerate() {
                x = conv.run(e, &x)?;
                x = att.apply(e, &format!("b{}.conv{}", i + 1, j + 1), x)?;
            }
            x = att.apply(e, &format!("b{}.last", i + 1), x)?;
            x = e.max_pool2d(&x, 2, 2)?;
        }
        let x = e.flatten(&x)?;
        let x = self.fc1.run(e, &x)?;
        let x = e.relu(&x)?;
        self.fc2.run(e, &x)
    }
}
