//! Scaled-down CNN backbones with named hook points for attention insertion.

pub mod checkpoint;
mod densenet;
mod efficientnet;
mod inception;
mod layers;
mod resnet;
mod vgg;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlock, SaBlock, SeBlock};
use crate::autograd::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::exec::{AttentionProbe, AttentionSite, Exec, ForwardRecord, ShapeExec, TapeExec};
use crate::param::{ParamGroup, ParamStore};
use crate::plan::{validate_plan, Insertion, ModuleSpec, PlacementPlan};
use crate::tensor::{Float, Tensor, TensorError};

use layers::{Attachments, Builder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "vgg_mini")]
    VggMini,
    #[serde(rename = "resnet_mini")]
    ResNetMini,
    #[serde(rename = "inception_mini")]
    InceptionMini,
    #[serde(rename = "densenet_mini")]
    DenseNetMini,
    #[serde(rename = "efficientnet_mini")]
    EfficientNetMini,
}

impl Family {
    pub const ALL: [Family; 5] =
        [Family::VggMini, Family::ResNetMini, Family::InceptionMini, Family::DenseNetMini, Family::EfficientNetMini];

    pub fn id(self) -> &'static str {
        match self {
            Family::VggMini => "vgg_mini",
            Family::ResNetMini => "resnet_mini",
            Family::InceptionMini => "inception_mini",
            Family::DenseNetMini => "densenet_mini",
            Family::EfficientNetMini => "efficientnet_mini",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Family::ALL.into_iter().find(|f| f.id() == s).ok_or_else(|| {
            let known: Vec<_> = Family::ALL.iter().map(|f| f.id()).collect();
            format!("unknown family `{s}` (expected one of {})", known.join(", "))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Toy,
    Paper,
}

impl Scale {
    pub fn input_size(self) -> usize {
        match self {
            Scale::Toy => 32,
            Scale::Paper => 224,
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Toy => "toy",
            Scale::Paper => "paper",
        })
    }
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "toy" => Ok(Scale::Toy),
            "paper" => Ok(Scale::Paper),
            other => Err(format!("unknown scale `{other}` (expected toy or paper)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookPoint {
    pub name: String,
    pub channels: usize,
    /// Ordinal of the hook in execution order.
    pub position: usize,
}

/// Hook names of a family in execution order.
pub fn hook_names(family: Family, scale: Scale) -> Vec<String> {
    match family {
        Family::VggMini => vgg::hook_names(&vgg::layout(scale)),
        Family::ResNetMini => resnet::hook_names(&resnet::layout(scale)),
        Family::InceptionMini => inception::hook_names(&inception::layout(scale)),
        Family::DenseNetMini => densenet::hook_names(&densenet::layout(scale)),
        Family::EfficientNetMini => efficientnet::hook_names(&efficientnet::layout(scale)),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Net {
    Vgg(vgg::Vgg),
    ResNet(resnet::ResNet),
    Inception(inception::Inception),
    DenseNet(densenet::DenseNet),
    EfficientNet(efficientnet::EfficientNet),
}

/// Result of a shape-only pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeTrace {
    pub hooks: Vec<(String, Vec<usize>)>,
    pub attention: Vec<AttentionSite>,
    pub output: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T: Float> {
    family: Family,
    scale: Scale,
    num_classes: usize,
    input_size: usize,
    seed: u64,
    store: ParamStore<T>,
    net: Net,
    hooks: Vec<HookPoint>,
    plan: PlacementPlan,
    attachments: Attachments,
}

/// Build a backbone with no attention attached.
pub fn build_backbone<T: Float>(family: Family, scale: Scale, num_classes: usize, seed: u64) -> Result<ModelGraph<T>> {
    ModelGraph::build(family, scale, num_classes, seed)
}

/// 64-bit FNV-1a, used to derive per-insertion seeds that do not depend on
/// attachment order.
fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for &b in *p {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl<T: Float> ModelGraph<T> {
    pub fn build(family: Family, scale: Scale, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Usage(format!("num_classes must be at least 2, got {num_classes}")));
        }
        let input_size = scale.input_size();
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
        let net = match family {
            Family::VggMini => Net::Vgg(vgg::Vgg::build(&mut b, &vgg::layout(scale), input_size, num_classes)?),
            Family::ResNetMini => Net::ResNet(resnet::ResNet::build(&mut b, &resnet::layout(scale), num_classes)?),
            Family::InceptionMini => {
                Net::Inception(inception::Inception::build(&mut b, &inception::layout(scale), num_classes)?)
            }
            Family::DenseNetMini => {
                Net::DenseNet(densenet::DenseNet::build(&mut b, &densenet::layout(scale), num_classes)?)
            }
            Family::EfficientNetMini => {
                Net::EfficientNet(efficientnet::EfficientNet::build(&mut b, &efficientnet::layout(scale), num_classes)?)
            }
        };
        let mut model = Self {
            family,
            scale,
            num_classes,
            input_size,
            seed,
            store,
            net,
            hooks: Vec::new(),
            plan: PlacementPlan::baseline(family),
            attachments: Attachments::default(),
        };
        let trace = model.infer_shapes(1)?;
        let expected = hook_names(family, scale);
        let seen: Vec<&str> = trace.hooks.iter().map(|(n, _)| n.as_str()).collect();
        if seen != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Tensor(TensorError::Shape(format!(
                "{family} forward visited hooks {seen:?}, expected {expected:?}"
            ))));
        }
        model.hooks = trace
            .hooks
            .into_iter()
            .enumerate()
            .map(|(position, (name, shape))| HookPoint { name, channels: shape[1], position })
            .collect();
        if trace.output != [1, num_classes] {
            return Err(Error::Tensor(TensorError::Shape(format!("{family} head produced {:?}", trace.output))));
        }
        Ok(model)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hooks(&self) -> &[HookPoint] {
        &self.hooks
    }

    pub fn hook(&self, name: &str) -> Option<&HookPoint> {
        self.hooks.iter().find(|h| h.name == name)
    }

    /// (name, channels) of every hook, in execution order.
    pub fn list_hook_points(&self) -> Vec<(String, usize)> {
        self.hooks.iter().map(|h| (h.name.clone(), h.channels)).collect()
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// The plan of everything attached so far.
    pub fn plan(&self) -> &PlacementPlan {
        &self.plan
    }

    pub fn count_params(&self, group: Option<ParamGroup>) -> usize {
        self.store.count(group)
    }

    /// A copy of this model with the plan's blocks spliced in. Insertions
    /// already present are rejected as duplicates.
    pub fn attach_attention(&self, plan: &PlacementPlan) -> Result<Self> {
        validate_plan(plan, self)?;
        let mut merged: Vec<Insertion> = self.plan.insertions.clone();
        merged.extend(plan.insertions.iter().cloned());
        let merged = PlacementPlan::new(self.family, merged)?;
        let mut out = self.clone();
        for ins in &plan.insertions {
            let hook = self.hook(&ins.hook).expect("validated");
            let block = match ins.module {
                ModuleSpec::Se { reduction } => {
                    let prefix = format!("attn.{}.se", ins.hook);
                    let seed = fnv1a(&[&self.seed.to_le_bytes(), prefix.as_bytes()]);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    AttentionBlock::Se(SeBlock::new(&mut out.store, &prefix, hook.channels, reduction, &mut rng)?)
                }
                ModuleSpec::Sa { kernel } => {
                    AttentionBlock::Sa(SaBlock::new(&mut out.store, &format!("attn.{}.sa", ins.hook), kernel)?)
                }
            };
            out.attachments.by_hook.entry(ins.hook.clone()).or_default().push(block);
        }
        // blocks at one hook run in plan order
        let mut order: HashMap<&str, Vec<_>> = HashMap::new();
        for ins in &merged.insertions {
            order.entry(ins.hook.as_str()).or_default().push(ins.module.kind());
        }
        for (hook, blocks) in out.attachments.by_hook.iter_mut() {
            let kinds = &order[hook.as_str()];
            blocks.sort_by_key(|b| kinds.iter().position(|k| *k == b.kind()));
        }
        out.plan = merged;
        Ok(out)
    }

    fn run<E: Exec<T>>(&self, e: &mut E, x: E::V) -> crate::tensor::Result<E::V> {
        let a = &self.attachments;
        match &self.net {
            Net::Vgg(n) => n.run(e, a, x),
            Net::ResNet(n) => n.run(e, a, x),
            Net::Inception(n) => n.run(e, a, x),
            Net::DenseNet(n) => n.run(e, a, x),
            Net::EfficientNet(n) => n.run(e, a, x),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s || shape[0] == 0 {
            return Err(Error::Tensor(TensorError::Shape(format!(
                "{} expects input (N, 3, {s}, {s}), got {shape:?}",
                self.family
            ))));
        }
        Ok(())
    }

    /// Shape-only pass for a batch of `n`.
    pub fn infer_shapes(&self, n: usize) -> Result<ShapeTrace> {
        let mut e = ShapeExec::new(&self.store);
        let output = self.run(&mut e, vec![n, 3, self.input_size, self.input_size])?;
        Ok(ShapeTrace { hooks: e.hooks, attention: e.attention, output })
    }

    /// Forward on a caller-owned tape. Batch-norm updates are returned in the
    /// record, not applied.
    pub fn forward_on(&self, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<(Var, ForwardRecord<T>)> {
        self.check_input(x.shape())?;
        let input = tape.constant(x.clone());
        let mut e = TapeExec::new(tape, &self.store, mode);
        let logits = self.run(&mut e, input)?;
        Ok((logits, e.finish()))
    }

    pub fn apply_bn_updates(&mut self, record: &mut ForwardRecord<T>) {
        for (id, stats) in record.bn_updates.drain(..) {
            *self.store.buffer_mut(id) = stats;
        }
    }

    /// Logits for a batch. Train mode uses batch statistics and updates the
    /// running statistics; Eval mode uses the running statistics.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let (logits, mut rec) = self.forward_on(&mut tape, x, mode)?;
        self.apply_bn_updates(&mut rec);
        Ok(tape.value(logits).clone())
    }

    /// Eval-mode logits.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let (logits, _) = self.forward_on(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(logits).clone())
    }

    /// Forward that captures every attention block's input and output and the
    /// runtime shape at every hook. Running statistics are left untouched.
    pub fn forward_probed(&self, x: &Tensor<T>, mode: Mode) -> Result<ProbedForward<T>> {
        self.check_input(x.shape())?;
        let mut tape = Tape::no_grad();
        let input = tape.constant(x.clone());
        let mut e = TapeExec::new(&mut tape, &self.store, mode).with_probes();
        let logits = self.run(&mut e, input)?;
        let rec = e.finish();
        Ok(ProbedForward { logits: tape.value(logits).clone(), probes: rec.probes, hook_shapes: rec.hook_shapes })
    }

    /// Run a real forward and confirm every hook's recorded channel count.
    pub fn probe_hooks(&self) -> Result<()> {
        let x = Tensor::zeros([2, 3, self.input_size, self.input_size]);
        let pf = self.forward_probed(&x, Mode::Eval)?;
        if pf.hook_shapes.len() != self.hooks.len() {
            return Err(Error::Tensor(TensorError::Shape("hook count changed between passes".into())));
        }
        for (hp, (name, shape)) in self.hooks.iter().zip(&pf.hook_shapes) {
            if hp.name != *name || hp.channels != shape[1] {
                return Err(Error::Tensor(TensorError::Shape(format!(
                    "hook {} records {} channels, runtime saw {name} with {shape:?}",
                    hp.name, hp.channels
                ))));
            }
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ModelGraph<U> {
        ModelGraph {
            family: self.family,
            scale: self.scale,
            num_classes: self.num_classes,
            input_size: self.input_size,
            seed: self.seed,
            store: self.store.cast(),
            net: self.net.clone(),
            hooks: self.hooks.clone(),
            plan: self.plan.clone(),
            attachments: self.attachments.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbedForward<T> {
    pub logits: Tensor<T>,
    pub probes: Vec<AttentionProbe<T>>,
    pub hook_shapes: Vec<(String, Vec<usize>)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::canonical_plans;

    #[test]
    fn family_ids_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.to_string().parse::<Family>().unwrap(), f);
            assert_eq!(serde_json::to_string(&f).unwrap(), format!("\"{}\"", f.id()));
        }
        assert!("lenet".parse::<Family>().is_err());
    }

    #[test]
    fn rejects_single_class() {
        assert!(build_backbone::<f32>(Family::VggMini, Scale::Toy, 1, 0).is_err());
    }

    #[test]
    fn toy_hook_lists() {
        let m = build_backbone::<f32>(Family::VggMini, Scale::Toy, 4, 0).unwrap();
        let lasts = m.hooks().iter().filter(|h| h.name.ends_with(".last")).count();
        assert_eq!(lasts, 5);
        assert_eq!(m.hook("b3.last").unwrap().channels, 64);
        let d = build_backbone::<f32>(Family::DenseNetMini, Scale::Toy, 4, 0).unwrap();
        for h in ["trans1.end", "trans2.end", "trans3.end", "pre_gap"] {
            assert!(d.hook(h).is_some(), "{h}");
        }
    }

    #[test]
    fn resnet_forward_shape() {
        let mut m = build_backbone::<f32>(Family::ResNetMini, Scale::Toy, 4, 0).unwrap();
        let x = Tensor::zeros([2, 3, 32, 32]);
        assert_eq!(m.forward(&x, Mode::Eval).unwrap().shape(), &[2, 4]);
        assert!(m.forward(&Tensor::zeros([2, 3, 31, 31]), Mode::Eval).is_err());
        assert!(m.forward(&Tensor::zeros([2, 1, 32, 32]), Mode::Eval).is_err());
    }

    #[test]
    fn attach_places_blocks_in_plan_order() {
        let m = build_backbone::<f32>(Family::ResNetMini, Scale::Toy, 4, 0).unwrap();
        let v3 = canonical_plans(Family::ResNetMini, Scale::Toy).v3_hybrid;
        let a = m.attach_attention(&v3).unwrap();
        let trace = a.infer_shapes(1).unwrap();
        let kinds: Vec<_> = trace.attention.iter().map(|s| (s.hook.clone(), s.kind)).collect();
        assert_eq!(kinds.len(), 6);
        assert_eq!(kinds[0].0, "layer2.end");
        assert_eq!(kinds[0].1, crate::attention::AttentionKind::Se);
        assert_eq!(kinds[1].1, crate::attention::AttentionKind::Sa);
        assert!(a.attach_attention(&v3).is_err());
    }

    #[test]
    fn every_family_probes_and_runs() {
        for f in Family::ALL {
            let mut m = build_backbone::<f32>(f, Scale::Toy, 4, 0).unwrap();
            m.probe_hooks().unwrap();
            let x = Tensor::from_fn(vec![2, 3, 32, 32], |i| (i % 7) as f32 * 0.1);
            let y = m.forward(&x, Mode::Train).unwrap();
            assert_eq!(y.shape(), &[2, 4], "{f}");
            assert!(y.is_finite());
        }
    }

    #[test]
    fn paper_scale_shapes() {
        for f in Family::ALL {
            let m = build_backbone::<f32>(f, Scale::Paper, 4, 0).unwrap();
            assert!(m.count_params(None) > build_backbone::<f32>(f, Scale::Toy, 4, 0).unwrap().count_params(None));
            assert_eq!(m.infer_shapes(1).unwrap().hooks.len(), m.hooks().len());
        }
    }
}
