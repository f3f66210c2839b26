//! Two-group Adam, step decay, early stopping and the epoch loop.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mode, Tape};
use crate::backbone::{checkpoint, ModelGraph};
use crate::data::{batches, sequential_batches, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{confusion_matrix, EvalReport, Fingerprint};
use crate::param::{kaiming_uniform, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Float, Tensor, TensorError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    /// Monitor the supplied test set.
    Test,
    /// Monitor a caller-supplied holdout set.
    Holdout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_attention: f64,
    pub weight_decay: f64,
    pub step_size: usize,
    pub gamma: f64,
    pub patience: usize,
    pub seed: u64,
    pub eval_split: EvalSplit,
    /// Write measured per-epoch wall time; when off `wall_ms` is 0 so logs
    /// are byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            lr_backbone: 1e-4,
            lr_attention: 6e-4,
            weight_decay: 1e-4,
            step_size: 10,
            gamma: 0.1,
            patience: 20,
            seed: 0,
            eval_split: EvalSplit::Test,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        for (name, v) in [("lr_backbone", self.lr_backbone), ("lr_attention", self.lr_attention), ("gamma", self.gamma)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.step_size == 0 {
            return bad("scheduler step size must be at least 1".into());
        }
        if self.patience > self.epochs {
            return bad(format!("patience {} exceeds epochs {}", self.patience, self.epochs));
        }
        Ok(())
    }

    pub fn lr_for(&self, group: ParamGroup, epoch: usize) -> f64 {
        let base = match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Attention => self.lr_attention,
        };
        step_lr(base, epoch, self.step_size, self.gamma)
    }
}

/// `base * gamma^floor(epoch / step)`.
pub fn step_lr(base: f64, epoch: usize, step: usize, gamma: f64) -> f64 {
    base * gamma.powi((epoch / step) as i32)
}

/// Step decay with step 10 and factor 0.1.
pub fn steplr_lr(base: f64, epoch: usize) -> f64 {
    step_lr(base, epoch, 10, 0.1)
}

/// First and second moments per parameter plus the shared step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<T> {
    pub m: HashMap<ParamId, Tensor<T>>,
    pub v: HashMap<ParamId, Tensor<T>>,
    pub t: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new() -> Self {
        Self { m: HashMap::new(), v: HashMap::new(), t: 0 }
    }
}

/// One Adam step over every parameter in `store`, with L2 weight decay added
/// to the gradient. `lr` gives the rate of each group.
pub fn adam_update<T: Float>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    lr: impl Fn(ParamGroup) -> f64,
    weight_decay: f64,
) -> Result<()> {
    if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
        return Err(Error::Usage(format!("parameter `{}` has no gradient", p.name)));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
    let one = T::one();
    let bc1 = T::lit(1.0 - ADAM_BETA1.powi(t));
    let bc2 = T::lit(1.0 - ADAM_BETA2.powi(t));
    let eps = T::lit(ADAM_EPS);
    let wd = T::lit(weight_decay);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        let step = T::lit(lr(p.group));
        let grad = p.grad.as_ref().expect("checked above");
        let n = p.value.len();
        let m = state.m.entry(id).or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
        let v = state.v.entry(id).or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
        let (md, vd) = (m.data_mut(), v.data_mut());
        let gd = grad.data();
        let theta = p.value.data_mut();
        for i in 0..n {
            let g = gd[i] + wd * theta[i];
            md[i] = b1 * md[i] + (one - b1) * g;
            vd[i] = b2 * vd[i] + (one - b2) * g * g;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            theta[i] -= step * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Tracks the best epoch; improvement means strictly higher accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_epoch: Option<usize>,
    pub best_accuracy: f64,
    last_epoch: Option<usize>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best_epoch: None, best_accuracy: f64::NEG_INFINITY, last_epoch: None }
    }

    /// Record an epoch. Returns whether this epoch improved and whether to stop.
    pub fn update(&mut self, epoch: usize, accuracy: f64) -> Result<(bool, StopDecision)> {
        let expected = self.last_epoch.map_or(0, |e| e + 1);
        if epoch != expected {
            return Err(Error::Usage(format!("early stopping got epoch {epoch}, expected {expected}")));
        }
        self.last_epoch = Some(epoch);
        let improved = accuracy > self.best_accuracy;
        if improved {
            self.best_accuracy = accuracy;
            self.best_epoch = Some(epoch);
        }
        let best = self.best_epoch.expect("set on first epoch");
        let decision = if epoch - best >= self.patience { StopDecision::Stop } else { StopDecision::Continue };
        Ok((improved, decision))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    pub lr_backbone: f64,
    pub lr_attention: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,train_loss,eval_accuracy,lr_backbone,lr_attention,wall_ms";

impl TrainLog {
    pub fn best(&self) -> &EpochRecord {
        &self.records[self.best_epoch]
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRAIN_LOG_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:?},{:?},{:?},{:?},{}",
                r.epoch, r.train_loss, r.eval_accuracy, r.lr_backbone, r.lr_attention, r.wall_ms
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("log serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub struct TrainOutcome {
    pub log: TrainLog,
    /// Checkpoint bytes of the best epoch.
    pub best_checkpoint: Vec<u8>,
}

fn check_dataset<T: Float>(model: &ModelGraph<T>, ds: &Dataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Usage(format!("{what} set is empty")));
    }
    if ds.num_classes() != model.num_classes() {
        return Err(Error::Usage(format!(
            "{what} set has {} classes but the model has {}",
            ds.num_classes(),
            model.num_classes()
        )));
    }
    if ds.image_size() != Some(model.input_size()) {
        return Err(Error::Usage(format!(
            "{what} images are {:?} pixels but the model expects {}",
            ds.image_size(),
            model.input_size()
        )));
    }
    Ok(())
}

/// One optimization step on a batch. Returns the batch's mean loss.
pub fn train_step<T: Float>(
    model: &mut ModelGraph<T>,
    state: &mut AdamState<T>,
    x: &Tensor<T>,
    labels: &[usize],
    lr: impl Fn(ParamGroup) -> f64,
    weight_decay: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (logits, mut rec) = model.forward_on(&mut tape, x, Mode::Train)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let loss_value = tape.value(loss).item().as_f64();
    if !loss_value.is_finite() {
        return Err(Error::Tensor(TensorError::Numeric(format!("training loss became {loss_value}"))));
    }
    let mut grads = tape.backward(loss)?;
    let store = model.store_mut();
    store.zero_grad();
    for &(id, var) in &rec.bindings {
        if let Some(g) = grads.take(var) {
            store.get_mut(id).grad = Some(g);
        }
    }
    model.apply_bn_updates(&mut rec);
    adam_update(model.store_mut(), state, lr, weight_decay)?;
    Ok(loss_value)
}

/// Train with early stopping on `eval_set` accuracy. On return `model` holds
/// the best epoch's weights.
pub fn train(
    model: &mut ModelGraph<f32>,
    train_set: &Dataset,
    eval_set: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(model, train_set, "training")?;
    check_dataset(model, eval_set, "evaluation")?;
    let mut state = AdamState::new();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut records = Vec::new();
    let mut best_checkpoint = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr_b = config.lr_for(ParamGroup::Backbone, epoch);
        let lr_a = config.lr_for(ParamGroup::Attention, epoch);
        let lr = |g: ParamGroup| match g {
            ParamGroup::Backbone => lr_b,
            ParamGroup::Attention => lr_a,
        };
        let mut loss_sum = 0.0;
        for batch in batches(train_set, config.batch_size, config.seed, epoch)? {
            let (x, labels) = batch?;
            let l = train_step(model, &mut state, &x, &labels, lr, config.weight_decay)?;
            loss_sum += l * labels.len() as f64;
        }
        let eval_accuracy = accuracy(model, eval_set, config.batch_size)?;
        let (improved, decision) = stopper.update(epoch, eval_accuracy)?;
        if improved {
            best_checkpoint = checkpoint::to_bytes(model);
        }
        let wall_ms = if config.record_wall_time { start.elapsed().as_millis() as u64 } else { 0 };
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            eval_accuracy,
            lr_backbone: lr_b,
            lr_attention: lr_a,
            wall_ms,
        };
        on_epoch(&rec);
        records.push(rec);
        if decision == StopDecision::Stop {
            stopped_early = epoch + 1 < config.epochs;
            break;
        }
    }
    *model = checkpoint::from_bytes(&best_checkpoint)?;
    let best_epoch = stopper.best_epoch.expect("at least one epoch ran");
    Ok(TrainOutcome { log: TrainLog { records, best_epoch, stopped_early }, best_checkpoint })
}

/// Eval-mode predictions (argmax, ties to the lowest class).
pub fn predict_dataset<T: Float>(model: &ModelGraph<T>, ds: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(ds.len());
    for batch in sequential_batches(ds, batch_size) {
        let (x, _) = batch?;
        let logits = model.predict(&x.cast::<T>())?;
        preds.extend(logits.argmax_rows()?);
    }
    Ok(preds)
}

fn accuracy<T: Float>(model: &ModelGraph<T>, ds: &Dataset, batch_size: usize) -> Result<f64> {
    let preds = predict_dataset(model, ds, batch_size)?;
    let cm = confusion_matrix(&preds, &ds.labels(), model.num_classes())?;
    Ok(cm.accuracy())
}

/// Confusion matrix and metrics of `model` on `ds`.
pub fn evaluate<T: Float>(model: &ModelGraph<T>, ds: &Dataset, plan_name: &str) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    check_dataset(model, ds, "evaluation")?;
    let preds = predict_dataset(model, ds, 64)?;
    let mut cm = confusion_matrix(&preds, &ds.labels(), model.num_classes())?;
    cm.class_names = ds.class_names.clone();
    let fp = Fingerprint { model: model.family().to_string(), plan: plan_name.to_string(), seed: model.seed() };
    Ok(EvalReport::from_confusion(cm, fp))
}

/// Softmax regression on raw pixels, trained with Adam. Returns test accuracy.
pub fn linear_probe(train_set: &Dataset, test_set: &Dataset, epochs: usize, lr: f64, seed: u64) -> Result<f64> {
    let k = train_set.num_classes();
    let d = train_set.samples.first().map(|s| s.image.len()).ok_or_else(|| Error::Usage("empty training set".into()))?;
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = store.add("probe.w", ParamGroup::Backbone, kaiming_uniform::<f32>(&[k, d], d, &mut rng).map(|v| v * 0.1))?;
    let b = store.add("probe.b", ParamGroup::Backbone, Tensor::zeros([k]))?;
    let mut state = AdamState::new();
    let flat = |x: Tensor<f32>| {
        let n = x.shape()[0];
        x.reshape([n, d])
    };
    for epoch in 0..epochs {
        for batch in batches(train_set, 32, seed, epoch)? {
            let (x, labels) = batch?;
            let mut tape = Tape::new();
            let xv = tape.constant(flat(x)?);
            let wv = tape.leaf(store.get(w).value.clone(), true);
            let bv = tape.leaf(store.get(b).value.clone(), true);
            let logits = tape.linear(xv, wv, Some(bv))?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let mut g = tape.backward(loss)?;
            store.get_mut(w).grad = g.take(wv);
            store.get_mut(b).grad = g.take(bv);
            adam_update(&mut store, &mut state, |_| lr, 0.0)?;
        }
    }
    let mut correct = 0usize;
    for batch in sequential_batches(test_set, 64) {
        let (x, labels) = batch?;
        let mut tape = Tape::no_grad();
        let xv = tape.constant(flat(x)?);
        let wv = tape.constant(store.get(w).value.clone());
        let bv = tape.constant(store.get(b).value.clone());
        let logits = tape.linear(xv, wv, Some(bv))?;
        let preds = tape.value(logits).argmax_rows()?;
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / test_set.len() as f64)
}
