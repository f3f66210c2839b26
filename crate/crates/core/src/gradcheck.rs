//! Central finite-difference checks of the analytic gradients.
//!
//! Every check runs in f64. Non-scalar outputs are reduced to a scalar with a
//! fixed random projection. A coordinate is skipped when either perturbed
//! evaluation lands on the other side of a ReLU or max kink, detected by a
//! change in the tape's kink signature.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{SaBlock, SeBlock};
use crate::autograd::{Mode, RunningStats, Tape, Var};
use crate::backbone::{build_backbone, Family, ModelGraph, Scale};
use crate::error::{Error, Result};
use crate::exec::TapeExec;
use crate::kernels::PoolMode;
use crate::param::ParamStore;
use crate::plan::canonical_plans;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Ops,
    Se,
    Sa,
    Model,
}

impl Target {
    pub const ALL: [Target; 4] = [Target::Ops, Target::Se, Target::Sa, Target::Model];
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::Ops => "ops",
            Target::Se => "se",
            Target::Sa => "sa",
            Target::Model => "model",
        })
    }
}

impl FromStr for Target {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Target::ALL
            .into_iter()
            .find(|t| t.to_string() == s)
            .ok_or_else(|| format!("unknown gradcheck target `{s}` (expected ops, se, sa or model)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coord {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Result for one input tensor of one check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub check: String,
    pub input: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<Coord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub target: Target,
    pub seed: u64,
    pub tol: f64,
    pub entries: Vec<Entry>,
}

impl Report {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.entries.iter().map(|e| e.checked).sum()
    }

    pub fn failures(&self) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(|e| !(e.max_rel_err < self.tol))
    }

    pub fn passed(&self) -> bool {
        self.checked() > 0 && self.failures().next().is_none()
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy)]
pub struct Settings {
    pub eps: f64,
    /// Coordinates sampled per input; `None` checks all.
    pub max_coords: Option<usize>,
}

impl Default for Settings {
    fn default() -> Self {
        Self { eps: DEFAULT_EPS, max_coords: Some(24) }
    }
}

fn coords(len: usize, max: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|_| rng.gen_range(0..len)).collect(),
        _ => (0..len).collect(),
    }
}

/// Compare one analytic gradient tensor against central differences.
/// `loss_at(i, delta)` evaluates the loss with coordinate `i` shifted by
/// `delta` and returns it together with the kink signature.
fn compare(
    check: &str,
    input: &str,
    analytic: &Tensor<f64>,
    base_sig: u64,
    idx: &[usize],
    eps: f64,
    mut loss_at: impl FnMut(usize, f64) -> Result<(f64, u64)>,
) -> Result<Entry> {
    let mut e = Entry {
        check: check.into(),
        input: input.into(),
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for &i in idx {
        let (fp, sp) = loss_at(i, eps)?;
        let (fm, sm) = loss_at(i, -eps)?;
        if sp != base_sig || sm != base_sig {
            e.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let r = rel_err(a, numeric);
        e.checked += 1;
        if r >= e.max_rel_err {
            e.max_rel_err = r;
            e.worst = Some(Coord { index: i, analytic: a, numeric, rel_err: r });
        }
    }
    Ok(e)
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Check every input of a tape computation.
pub fn check_fn(
    name: &str,
    inputs: &[(&str, Tensor<f64>)],
    build: &Build<'_>,
    settings: Settings,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Entry>> {
    // draw the projection once from the output shape
    let out_shape = {
        let mut t = Tape::<f64>::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|(_, v)| t.constant(v.clone())).collect();
        let o = build(&mut t, &vars)?;
        t.shape(o).to_vec()
    };
    let proj = Tensor::from_fn(out_shape, |_| rng.gen_range(-1.0..1.0));
    let run = |values: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut t = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| t.leaf(v.clone(), true)).collect();
        let o = build(&mut t, &vars)?;
        let loss = if t.value(o).len() == 1 && t.shape(o).is_empty() {
            o
        } else {
            let p = t.constant(proj.clone());
            let m = t.mul(o, p)?;
            t.sum(m)?
        };
        Ok((t, vars, loss))
    };
    let base: Vec<Tensor<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let (tape, vars, loss) = run(&base)?;
    let sig = tape.kink_signature();
    let grads = tape.backward(loss)?;
    let mut out = Vec::new();
    for (k, (iname, value)) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(value.shape().to_vec());
        let analytic = grads.get(vars[k]).cloned().unwrap_or(zero);
        let idx = coords(value.len(), settings.max_coords, rng);
        let entry = compare(name, iname, &analytic, sig, &idx, settings.eps, |i, d| {
            let mut vals = base.clone();
            vals[k].data_mut()[i] += d;
            let (t, _, l) = run(&vals)?;
            Ok((t.value(l).item(), t.kink_signature()))
        })?;
        out.push(entry);
    }
    Ok(out)
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn ops_checks(settings: Settings, rng: &mut ChaCha8Rng) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    let mut go = |name: &str, inputs: Vec<(&str, Tensor<f64>)>, f: &Build<'_>, rng: &mut ChaCha8Rng| -> Result<()> {
        out.extend(check_fn(name, &inputs, f, settings, rng)?);
        Ok(())
    };
    let x4 = |rng: &mut ChaCha8Rng| uniform(&[2, 3, 6, 6], rng);

    for (k, stride, pad) in [(3, 1, 1), (3, 2, 0), (1, 1, 0), (5, 1, 2)] {
        let inputs = vec![("x", x4(rng)), ("w", uniform(&[4, 3, k, k], rng)), ("b", uniform(&[4], rng))];
        go(&format!("conv2d k{k} s{stride} p{pad}"), inputs, &|t, v| Ok(t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?), rng)?;
    }
    let inputs = vec![("x", x4(rng)), ("w", uniform(&[3, 1, 3, 3], rng)), ("b", uniform(&[3], rng))];
    go("depthwise_conv2d s1", inputs, &|t, v| Ok(t.depthwise_conv2d(v[0], v[1], Some(v[2]), 1, 1)?), rng)?;
    let inputs = vec![("x", x4(rng)), ("w", uniform(&[3, 1, 3, 3], rng))];
    go("depthwise_conv2d s2", inputs, &|t, v| Ok(t.depthwise_conv2d(v[0], v[1], None, 2, 1)?), rng)?;
    go("max_pool2d", vec![("x", x4(rng))], &|t, v| Ok(t.max_pool2d(v[0], 2, 2)?), rng)?;
    go("avg_pool2d", vec![("x", x4(rng))], &|t, v| Ok(t.avg_pool2d(v[0], 3, 1, 1)?), rng)?;
    go("avg_pool2d 2x2", vec![("x", x4(rng))], &|t, v| Ok(t.avg_pool2d(v[0], 2, 2, 0)?), rng)?;
    for mode in [PoolMode::Avg, PoolMode::Max] {
        go(&format!("global_pool {mode:?}"), vec![("x", x4(rng))], &|t, v| Ok(t.global_pool(v[0], mode)?), rng)?;
        go(&format!("channel_pool {mode:?}"), vec![("x", x4(rng))], &|t, v| Ok(t.channel_pool(v[0], mode)?), rng)?;
    }
    let inputs = vec![("x", uniform(&[3, 5], rng)), ("w", uniform(&[4, 5], rng)), ("b", uniform(&[4], rng))];
    go("linear", inputs, &|t, v| Ok(t.linear(v[0], v[1], Some(v[2]))?), rng)?;
    go("relu", vec![("x", uniform(&[2, 3, 4, 4], rng))], &|t, v| Ok(t.relu(v[0])?), rng)?;
    go("sigmoid", vec![("x", uniform(&[2, 3, 4, 4], rng).map(|v| v * 3.0))], &|t, v| Ok(t.sigmoid(v[0])?), rng)?;
    for mode in [Mode::Train, Mode::Eval] {
        let inputs = vec![("x", x4(rng)), ("gamma", uniform(&[3], rng)), ("beta", uniform(&[3], rng))];
        let stats = RunningStats { mean: vec![0.1, -0.2, 0.3], var: vec![0.5, 1.5, 2.0] };
        go(
            &format!("batch_norm2d {mode:?}"),
            inputs,
            &|t, v| {
                let mut s = stats.clone();
                Ok(t.batch_norm2d(v[0], v[1], v[2], &mut s, mode)?)
            },
            rng,
        )?;
    }
    go("add same shape", vec![("a", x4(rng)), ("b", x4(rng))], &|t, v| Ok(t.add(v[0], v[1])?), rng)?;
    go("mul channel gate", vec![("x", x4(rng)), ("s", uniform(&[2, 3, 1, 1], rng))], &|t, v| Ok(t.mul(v[0], v[1])?), rng)?;
    go("mul spatial map", vec![("x", x4(rng)), ("m", uniform(&[2, 1, 6, 6], rng))], &|t, v| Ok(t.mul(v[0], v[1])?), rng)?;
    go("add broadcast", vec![("x", x4(rng)), ("b", uniform(&[1, 3, 1, 1], rng))], &|t, v| Ok(t.add(v[0], v[1])?), rng)?;
    let inputs = vec![("a", uniform(&[2, 2, 3, 3], rng)), ("b", uniform(&[2, 4, 3, 3], rng))];
    go("concat", inputs, &|t, v| Ok(t.concat(&[v[0], v[1]])?), rng)?;
    go("reshape", vec![("x", x4(rng))], &|t, v| Ok(t.reshape(v[0], &[2, 108])?), rng)?;
    go("flatten", vec![("x", x4(rng))], &|t, v| Ok(t.flatten(v[0])?), rng)?;
    go("sum", vec![("x", uniform(&[3, 4], rng))], &|t, v| Ok(t.sum(v[0])?), rng)?;
    let labels = [0usize, 3, 1];
    go("softmax_cross_entropy", vec![("logits", uniform(&[3, 4], rng).map(|v| v * 2.0))], &|t, v| {
        Ok(t.softmax_cross_entropy(v[0], &labels)?)
    }, rng)?;
    Ok(out)
}

/// Randomize every parameter in the store so that no gradient is trivially
/// zero.
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

fn block_check(
    name: &str,
    store: ParamStore<f64>,
    x: Tensor<f64>,
    forward: &dyn Fn(&mut TapeExec<'_, f64>, &Var) -> crate::tensor::Result<Var>,
    settings: Settings,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Entry>> {
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    let mut inputs = vec![("x".to_string(), x)];
    for p in store.iter() {
        inputs.push((p.name.clone(), p.value.clone()));
    }
    let refs: Vec<(&str, Tensor<f64>)> = inputs.iter().map(|(n, v)| (n.as_str(), v.clone())).collect();
    let build = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        // route the parameter leaves through the executor bindings
        let mut e = TapeExec::new(t, &store, Mode::Train);
        for (k, n) in names.iter().enumerate() {
            e.bind(store.id_of(n).expect("known"), v[k + 1]);
        }
        Ok(forward(&mut e, &v[0])?)
    };
    check_fn(name, &refs, &build, settings, rng)
}

fn se_checks(settings: Settings, rng: &mut ChaCha8Rng) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (c, r) in [(32, 16), (6, 16)] {
        let mut store = ParamStore::<f64>::new();
        let block = SeBlock::new(&mut store, "se", c, r, rng)?;
        randomize(&mut store, rng, 0.5);
        let x = uniform(&[2, c, 5, 5], rng);
        out.extend(block_check(&format!("se C{c} r{r}"), store, x, &|e, x| block.forward(e, x), settings, rng)?);
    }
    Ok(out)
}

fn sa_checks(settings: Settings, rng: &mut ChaCha8Rng) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for k in [7, 3] {
        let mut store = ParamStore::<f64>::new();
        let block = SaBlock::new(&mut store, "sa", k)?;
        randomize(&mut store, rng, 0.3);
        let x = uniform(&[2, 4, 6, 6], rng);
        out.extend(block_check(&format!("sa k{k}"), store, x, &|e, x| block.forward(e, x), settings, rng)?);
    }
    Ok(out)
}

/// VggMini at toy scale with the hybrid plan, batch-norm in training mode,
/// attention parameters randomized.
fn model_checks(seed: u64, settings: Settings, rng: &mut ChaCha8Rng) -> Result<Vec<Entry>> {
    let plan = canonical_plans(Family::VggMini, Scale::Toy).v3_hybrid;
    let mut model: ModelGraph<f64> = build_backbone(Family::VggMini, Scale::Toy, 4, seed)?.attach_attention(&plan)?;
    for p in model.store_mut().iter_mut() {
        if p.name.starts_with("attn.") {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    let s = model.input_size();
    let x = uniform(&[2, 3, s, s], rng);
    let labels = [1usize, 2];
    let loss_of = |m: &ModelGraph<f64>| -> Result<(Tape<f64>, crate::exec::ForwardRecord<f64>, Var)> {
        let mut tape = Tape::new();
        let (logits, rec) = m.forward_on(&mut tape, &x, Mode::Train)?;
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        Ok((tape, rec, loss))
    };
    let (tape, rec, loss) = loss_of(&model)?;
    let sig = tape.kink_signature();
    let grads = tape.backward(loss)?;
    let per_param = settings.max_coords.map(|m| (m / 8).max(2));
    let mut out = Vec::new();
    for (id, var) in rec.bindings {
        let name = model.store().get(id).name.clone();
        let value = model.store().get(id).value.clone();
        let analytic = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
        let idx = coords(value.len(), per_param, rng);
        let entry = compare("vgg_mini toy v3", &name, &analytic, sig, &idx, settings.eps, |i, d| {
            let orig = model.store().get(id).value.data()[i];
            model.store_mut().get_mut(id).value.data_mut()[i] = orig + d;
            let res = loss_of(&model);
            model.store_mut().get_mut(id).value.data_mut()[i] = orig;
            let (t, _, l) = res?;
            Ok((t.value(l).item(), t.kink_signature()))
        })?;
        out.push(entry);
    }
    Ok(out)
}

/// Run one target.
pub fn run(target: Target, seed: u64, tol: f64, settings: Settings) -> Result<Report> {
    if !(tol >= 0.0) {
        return Err(Error::Usage(format!("tolerance must be non-negative, got {tol}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = match target {
        Target::Ops => ops_checks(Settings { max_coords: None, ..settings }, &mut rng)?,
        Target::Se => se_checks(settings, &mut rng)?,
        Target::Sa => sa_checks(settings, &mut rng)?,
        Target::Model => model_checks(seed, settings, &mut rng)?,
    };
    Ok(Report { target, seed, tol, entries })
}
