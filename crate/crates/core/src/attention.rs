//! Channel (squeeze-and-excitation) and spatial attention blocks.
//!
//! Both blocks compute a gate in (0, 1) and multiply it into the feature map,
//! so they can only attenuate. Gate layers start at zero, which makes every
//! freshly attached block a uniform 0.5 gate.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ModelGraph;
use crate::exec::Exec;
use crate::kernels::PoolMode;
use crate::plan::{validate_plan, ModuleSpec, PlacementPlan};
use crate::param::{kaiming_uniform, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Float, Result, Tensor, TensorError};

pub const DEFAULT_REDUCTION: usize = 16;
pub const DEFAULT_SA_KERNEL: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttentionKind {
    #[serde(rename = "SE")]
    Se,
    #[serde(rename = "SA")]
    Sa,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Se => "SE",
            AttentionKind::Sa => "SA",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "SE" => Ok(AttentionKind::Se),
            "SA" => Ok(AttentionKind::Sa),
            other => Err(format!("unknown attention kind `{other}` (expected SE or SA)")),
        }
    }
}

/// Bottleneck width of an SE block.
pub fn se_hidden(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

/// Weights plus biases of both excitation layers: `2*C*h + h + C`.
pub fn se_param_count(channels: usize, reduction: usize) -> usize {
    let h = se_hidden(channels, reduction);
    2 * channels * h + h + channels
}

/// A single-output `k x k` conv over two pooled maps, plus one bias.
pub fn sa_param_count(kernel: usize) -> usize {
    2 * kernel * kernel + 1
}

/// Multiply-accumulates of one SE forward on a `(C, H, W)` map: the squeeze
/// sum, both dense layers, and the rescale.
pub fn se_macs(channels: usize, h: usize, w: usize, reduction: usize) -> usize {
    let hidden = se_hidden(channels, reduction);
    2 * channels * h * w + 2 * channels * hidden
}

/// Multiply-accumulates of one SA forward on a `(C, H, W)` map: two channel
/// reductions, the `k x k` conv over two maps, and the rescale.
pub fn sa_macs(channels: usize, h: usize, w: usize, kernel: usize) -> usize {
    3 * channels * h * w + 2 * kernel * kernel * h * w
}

/// Squeeze-and-excitation: global average pool, dense → ReLU → dense →
/// sigmoid, channel-wise rescale.
#[derive(Debug, Clone, PartialEq)]
pub struct SeBlock {
    pub channels: usize,
    pub reduction: usize,
    pub hidden: usize,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl SeBlock {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if channels == 0 || reduction == 0 {
            return Err(TensorError::Usage(format!(
                "SE block needs positive channels and reduction, got C={channels}, r={reduction}"
            )));
        }
        let hidden = se_hidden(channels, reduction);
        let g = ParamGroup::Attention;
        let fc1_w = store.add(format!("{prefix}.fc1.w"), g, kaiming_uniform(&[hidden, channels], channels, rng))?;
        let fc1_b = store.add(format!("{prefix}.fc1.b"), g, Tensor::zeros([hidden]))?;
        let fc2_w = store.add(format!("{prefix}.fc2.w"), g, Tensor::zeros([channels, hidden]))?;
        let fc2_b = store.add(format!("{prefix}.fc2.b"), g, Tensor::zeros([channels]))?;
        Ok(Self { channels, reduction, hidden, fc1_w, fc1_b, fc2_w, fc2_b })
    }

    /// The `(N, C, 1, 1)` channel gate.
    pub fn gate<T: Float, E: Exec<T>>(&self, e: &mut E, x: &E::V) -> Result<E::V> {
        let s = e.shape_of(x);
        if s.len() != 4 || s[1] != self.channels {
            return crate::tensor::shape_err(format!(
                "SE block for {} channels got input {s:?}",
                self.channels
            ));
        }
        let n = s[0];
        let z = e.global_pool(x, PoolMode::Avg)?;
        let z = e.reshape(&z, &[n, self.channels])?;
        let h = e.linear(&z, self.fc1_w, Some(self.fc1_b))?;
        let h = e.relu(&h)?;
        let g = e.linear(&h, self.fc2_w, Some(self.fc2_b))?;
        let g = e.sigmoid(&g)?;
        e.reshape(&g, &[n, self.channels, 1, 1])
    }

    pub fn forward<T: Float, E: Exec<T>>(&self, e: &mut E, x: &E::V) -> Result<E::V> {
        let g = self.gate(e, x)?;
        e.mul(x, &g)
    }

    pub fn param_count(&self) -> usize {
        se_param_count(self.channels, self.reduction)
    }
}

/// Spatial attention: channel-wise mean and max maps, `k x k` conv, sigmoid,
/// spatial rescale.
#[derive(Debug, Clone, PartialEq)]
pub struct SaBlock {
    pub kernel: usize,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
}

impl SaBlock {
    pub fn new<T: Float>(store: &mut ParamStore<T>, prefix: &str, kernel: usize) -> Result<Self> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(TensorError::Usage(format!("SA kernel must be odd and positive, got {kernel}")));
        }
        let g = ParamGroup::Attention;
        let conv_w = store.add(format!("{prefix}.conv.w"), g, Tensor::zeros([1, 2, kernel, kernel]))?;
        let conv_b = store.add(format!("{prefix}.conv.b"), g, Tensor::zeros([1]))?;
        Ok(Self { kernel, conv_w, conv_b })
    }

    /// The `(N, 1, H, W)` spatial map.
    pub fn map<T: Float, E: Exec<T>>(&self, e: &mut E, x: &E::V) -> Result<E::V> {
        let avg = e.channel_pool(x, PoolMode::Avg)?;
        let max = e.channel_pool(x, PoolMode::Max)?;
        let d = e.concat(&[avg, max])?;
        let m = e.conv2d(&d, self.conv_w, Some(self.conv_b), 1, self.kernel / 2)?;
        e.sigmoid(&m)
    }

    pub fn forward<T: Float, E: Exec<T>>(&self, e: &mut E, x: &E::V) -> Result<E::V> {
        let m = self.map(e, x)?;
        e.mul(x, &m)
    }

    pub fn param_count(&self) -> usize {
        sa_param_count(self.kernel)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionBlock {
    Se(SeBlock),
    Sa(SaBlock),
}

impl AttentionBlock {
    pub fn kind(&self) -> AttentionKind {
        match self {
            AttentionBlock::Se(_) => AttentionKind::Se,
            AttentionBlock::Sa(_) => AttentionKind::Sa,
        }
    }

    pub fn forward<T: Float, E: Exec<T>>(&self, e: &mut E, x: &E::V) -> Result<E::V> {
        match self {
            AttentionBlock::Se(b) => b.forward(e, x),
            AttentionBlock::Sa(b) => b.forward(e, x),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            AttentionBlock::Se(b) => b.param_count(),
            AttentionBlock::Sa(b) => b.param_count(),
        }
    }
}

/// Forward of an SE block on a tape executor.
pub fn se_forward<T: Float, E: Exec<T>>(e: &mut E, x: &E::V, block: &SeBlock) -> Result<E::V> {
    block.forward(e, x)
}

/// Forward of an SA block on a tape executor.
pub fn sa_forward<T: Float, E: Exec<T>>(e: &mut E, x: &E::V, block: &SaBlock) -> Result<E::V> {
    block.forward(e, x)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverheadEntry {
    pub hook: String,
    pub kind: AttentionKind,
    pub channels: usize,
    pub params: usize,
    pub flops: usize,
}

/// Parameters and multiply-accumulates added by a placement plan.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OverheadReport {
    pub params_added: usize,
    pub flops_added: usize,
    pub breakdown: Vec<OverheadEntry>,
}

impl OverheadReport {
    pub fn push(&mut self, entry: OverheadEntry) {
        self.params_added += entry.params;
        self.flops_added += entry.flops;
        self.breakdown.push(entry);
    }
}

/// Parameters and multiply-accumulates the plan would add to `model` for a
/// batch of shape `input_shape`. Feature-map shapes come from a shape-only
/// pass, so this is cheap even at full scale.
pub fn attention_overhead<T: Float>(
    model: &ModelGraph<T>,
    plan: &PlacementPlan,
    input_shape: &[usize],
) -> crate::error::Result<OverheadReport> {
    validate_plan(plan, model)?;
    let s = model.input_size();
    if input_shape.len() != 4 || input_shape[1] != 3 || input_shape[2] != s || input_shape[3] != s {
        return Err(crate::error::Error::Usage(format!(
            "overhead input shape must be (N, 3, {s}, {s}), got {input_shape:?}"
        )));
    }
    let n = input_shape[0];
    let trace = model.infer_shapes(n)?;
    let mut report = OverheadReport::default();
    for ins in &plan.insertions {
        let (_, shape) = trace.hooks.iter().find(|(h, _)| *h == ins.hook).expect("validated hook");
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let (params, flops) = match ins.module {
            ModuleSpec::Se { reduction } => (se_param_count(c, reduction), n * se_macs(c, h, w, reduction)),
            ModuleSpec::Sa { kernel } => (sa_param_count(kernel), n * sa_macs(c, h, w, kernel)),
        };
        report.push(OverheadEntry { hook: ins.hook.clone(), kind: ins.kind(), channels: c, params, flops });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn se_param_count_closed_form() {
        assert_eq!(se_param_count(176, 16), 4059);
        assert_eq!(se_param_count(16, 16), 49);
        for c in 1..40 {
            assert_eq!(se_hidden(c, c), 1);
        }
        // C < r still gets a width-1 bottleneck
        assert_eq!(se_hidden(4, 16), 1);
        assert_eq!(sa_param_count(7), 99);
    }

    #[test]
    fn kinds_round_trip_text() {
        for k in [AttentionKind::Se, AttentionKind::Sa] {
            assert_eq!(k.to_string().parse::<AttentionKind>().unwrap(), k);
        }
        assert!("se".parse::<AttentionKind>().is_err());
    }
}
