//! Five sequential multi-branch modules A–E with grid reductions after B
//! and D.

use super::layers::{Attachments, Builder, ConvBn, Dense};
use super::Scale;
use crate::exec::Exec;
use crate::kernels::PoolMode;
use crate::tensor::{Float, Result};

pub(crate) const MODULES: [char; 5] = ['A', 'B', 'C', 'D', 'E'];

pub(crate) struct InceptionLayout {
    pub stem: Vec<(usize, usize)>,
    pub branch_widths: [usize; 5],
}

pub(crate) fn layout(scale: Scale) -> InceptionLayout {
    match scale {
        // (width, stride) per stem conv, followed by a 2x2 max-pool
        Scale::Paper => InceptionLayout { stem: vec![(32, 2), (64, 1)], branch_widths: [32, 48, 64, 80, 96] },
        Scale::Toy => InceptionLayout { stem: vec![(16, 1)], branch_widths: [8, 12, 16, 20, 24] },
    }
}

pub(crate) fn hook_names(_l: &InceptionLayout) -> Vec<String> {
    let mut out: Vec<String> = MODULES.iter().map(|m| format!("incep{m}.end")).collect();
    out.push("pre_gap".into());
    out
}

/// Branches: 1x1; 1x1→3x3; 1x1→3x3→3x3; 3x3 avg-pool→1x1. Outputs are
/// concatenated along channels.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct InceptionModule {
    b1: ConvBn,
    b2: [ConvBn; 2],
    b3: [ConvBn; 3],
    b4: ConvBn,
}

impl InceptionModule {
    fn build<T: Float>(b: &mut Builder<'_, T>, name: &str, cin: usize, w: usize) -> Result<Self> {
        let r = (w / 2).max(1);
        Ok(Self {
            b1: b.conv_bn(&format!("{name}.b1"), cin, w, 1, 1, 0, true)?,
            b2: [
                b.conv_bn(&format!("{name}.b2a"), cin, r, 1, 1, 0, true)?,
                b.conv_bn(&format!("{name}.b2b"), r, w, 3, 1, 1, true)?,
            ],
            b3: [
                b.conv_bn(&format!("{name}.b3a"), cin, r, 1, 1, 0, true)?,
                b.conv_bn(&format!("{name}.b3b"), r, w, 3, 1, 1, true)?,
                b.conv_bn(&format!("{name}.b3c"), w, w, 3, 1, 1, true)?,
            ],
            b4: b.conv_bn(&format!("{name}.b4"), cin, w, 1, 1, 0, true)?,
        })
    }

    fn run<T: Float, E: Exec<T>>(&self, e: &mut E, x: &E::V) -> Result<E::V> {
        let y1 = self.b1.run(e, x)?;
        let mut y2 = x.clone();
        for c in &self.b2 {
            y2 = c.run(e, &y2)?;
        }
        let mut y3 = x.clone();
        for c in &self.b3 {
            y3 = c.run(e, &y3)?;
        }
        let p = e.avg_pool2d(x, 3, 1, 1)?;
        let y4 = self.b4.run(e, &p)?;
        e.concat(&[y1, y2, y3, y4])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Inception {
    stem: Vec<ConvBn>,
    modules: Vec<InceptionModule>,
    fc: Dense,
}

impl Inception {
    pub fn build<T: Float>(b: &mut Builder<'_, T>, l: &InceptionLayout, num_classes: usize) -> Result<Self> {
        let mut cin = 3;
        let mut stem = Vec::new();
        for (i, &(w, s)) in l.stem.iter().enumerate() {
            stem.push(b.conv_bn(&format!("stem.conv{}", i + 1), cin, w, 3, s, 1, true)?);
            cin = w;
        }
        let mut modules = Vec::new();
        for (m, &w) in MODULES.iter().zip(&l.branch_widths) {
            modules.push(InceptionModule::build(b, &format!("incep{m}"), cin, w)?);
            cin = 4 * w;
        }
        let fc = b.dense("fc", cin, num_classes)?;
        Ok(Self { stem, modules, fc })
    }

    pub fn run<T: Float, E: Exec<T>>(&self, e: &mut E, att: &Attachments, x: E::V) -> Result<E::V> {
        let mut x = x;
        for c in &self.stem {
            x = c.run(e, &x)?;
        }
        x = e.max_pool2d(&x, 2, 2)?;
        for (m, module) in MODULES.iter().zip(&self.modules) {
            x = module.run(e, &x)?;
            x = att.apply(e, &format!("incep{m}.end"), x)?;
            if *m == 'B' || *m == 'D' {
                x = e.max_pool2d(&x, 2, 2)?;
            }
        }
        x = att.apply(e, "pre_gap", x)?;
        let x = e.global_pool(&x, PoolMode::Avg)?;
        let x = e.flatten(&x)?;
        self.fc.run(e, &x)
    }
}
