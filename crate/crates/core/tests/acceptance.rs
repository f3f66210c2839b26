//! Acceptance run: one PASS/FAIL line per criterion. Exits nonzero if any
//! criterion fails.

use attnforge::attention::{sa_param_count, se_param_count, AttentionKind};
use attnforge::autograd::Mode;
use attnforge::backbone::{build_backbone, checkpoint, Family, ModelGraph, Scale};
use attnforge::data::{gen_synthetic, raw_from_bytes, raw_to_bytes, Dataset};
use attnforge::gradcheck::{self, Settings, Target, DEFAULT_TOL};
use attnforge::kernels;
use attnforge::metrics::{micro_precision_recall, precision_recall_f1, ConfusionMatrix};
use attnforge::param::{ParamGroup, ParamStore};
use attnforge::plan::{canonical_plans, parse_plan, validate_plan, ModuleSpec, PlacementPlan};
use attnforge::train::{adam_update, evaluate, linear_probe, steplr_lr, train, AdamState, EarlyStopping, StopDecision, TrainConfig, TrainOutcome, ADAM_EPS};
use attnforge::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

mod common;
use common::{max_rel, naive_conv, rand_tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(t: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let e = t.elapsed();
    if e > limit {
        return Err(format!("{what} took {:.1}s, limit {}s", e.as_secs_f64(), limit.as_secs()));
    }
    Ok(())
}

fn disclaimer() -> Outcome {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md");
    let text = std::fs::read_to_string(path).map_err(|e| format!("README.md: {e}"))?;
    let lower = text.to_lowercase();
    ensure!(lower.contains("not reproduc"), "README does not state that published accuracies are not reproduced");
    ensure!(lower.contains("pretrained"), "README does not say why (pretrained weights, data, compute)");
    Ok("README states the accuracy tables are out of scope".into())
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for target in Target::ALL {
        for seed in 0..3 {
            let r = gradcheck::run(target, seed, DEFAULT_TOL, Settings::default()).map_err(|e| e.to_string())?;
            ensure!(r.passed(), "{target} seed {seed}: max rel err {:e}", r.max_rel_err());
            worst = worst.max(r.max_rel_err());
            coords += r.checked();
        }
    }
    within(t, Duration::from_secs(60), "gradient suite")?;
    Ok(format!("4 targets x 3 seeds, {coords} coords, max rel err {worst:.2e}, {:.1}s", t.elapsed().as_secs_f64()))
}

fn conv_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst, mut cases) = (0.0f64, 0);
    for n in 1..=4 {
        for c in 1..=4 {
            for h in 1..=8 {
                for w in 1..=8 {
                    for k in [1, 3, 5, 7] {
                        let mut cfgs = vec![(1, k / 2)];
                        if k <= h && k <= w {
                            cfgs.push((1, 0));
                            cfgs.push((2, 0));
                        }
                        for (stride, pad) in cfgs {
                            let co = 1 + (n * c + w) % 4;
                            let x = rand_tensor(&[n, c, h, w], &mut rng);
                            let wt = rand_tensor(&[co, c, k, k], &mut rng);
                            let b = rand_tensor(&[co], &mut rng);
                            let y = kernels::conv2d_forward(&x, &wt, Some(&b), stride, pad).map_err(|e| e.to_string())?;
                            worst = worst.max(max_rel(&y, &naive_conv(&x, &wt, Some(&b), stride, pad)));
                            cases += 1;
                        }
                    }
                }
            }
        }
    }
    ensure!(worst < 1e-6, "worst relative error {worst:e}");
    within(t, Duration::from_secs(30), "conv sweep")?;
    Ok(format!("{cases} shapes, worst rel err {worst:.2e}, {:.1}s", t.elapsed().as_secs_f64()))
}

fn ulps(a: f32, b: f32) -> u64 {
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
}

fn per_sample(x: &Tensor<f32>, i: usize) -> Tensor<f32> {
    let s = x.shape();
    let per = s[1] * s[2] * s[3];
    Tensor::new([1, s[1], s[2], s[3]], x.data()[i * per..(i + 1) * per].to_vec()).unwrap()
}

fn attention_invariants() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut probes = 0;
    for f in Family::ALL {
        let plan = canonical_plans(f, Scale::Toy).v1_global_se;
        let zero = build_backbone::<f32>(f, Scale::Toy, 4, 0).unwrap().attach_attention(&plan).map_err(|e| e.to_string())?;
        let x = Tensor::from_fn([3, 3, 32, 32], |_| rng.gen_range(0.0f32..1.0));

        // zero init: every insertion halves its input
        let p = zero.forward_probed(&x, Mode::Eval).map_err(|e| e.to_string())?;
        ensure!(p.probes.len() == plan.insertions.len(), "{f}: {} probes for {} insertions", p.probes.len(), plan.insertions.len());
        for pr in &p.probes {
            ensure!(pr.input.shape() == pr.output.shape(), "{f} {}: shape changed", pr.hook);
            for (o, i) in pr.output.data().iter().zip(pr.input.data()) {
                ensure!(ulps(*o, 0.5 * i) <= 1, "{f} {}: {o} is not half of {i}", pr.hook);
            }
        }

        // random attention weights: gates in (0, 1), attenuation, batch independence
        let mut m = zero.clone();
        for prm in m.store_mut().iter_mut().filter(|p| p.group == ParamGroup::Attention) {
            prm.value = Tensor::from_fn(prm.value.shape().to_vec(), |_| rng.gen_range(-0.1f32..0.1));
        }
        let batched = m.forward_probed(&x, Mode::Eval).map_err(|e| e.to_string())?;
        for pr in &batched.probes {
            ensure!(pr.input.shape() == pr.output.shape(), "{f} {}: shape changed", pr.hook);
            for (o, i) in pr.output.data().iter().zip(pr.input.data()) {
                ensure!(o.abs() <= i.abs(), "{f} {}: |{o}| > |{i}|", pr.hook);
                if *i != 0.0 {
                    let g = o / i;
                    ensure!(g > 0.0 && g < 1.0, "{f} {}: gate {g}", pr.hook);
                }
            }
            probes += 1;
        }
        for n in 0..3 {
            let single = m.forward_probed(&per_sample(&x, n), Mode::Eval).map_err(|e| e.to_string())?;
            for (a, b) in single.probes.iter().zip(&batched.probes) {
                ensure!(a.output == per_sample(&b.output, n), "{f} {}: sample {n} depends on the batch", a.hook);
            }
            ensure!(single.logits == per_sample4(&batched.logits, n), "{f}: logits of sample {n} depend on the batch");
        }
    }
    within(t, Duration::from_secs(60), "attention invariants")?;
    Ok(format!("5 families, {probes} insertions, {:.1}s", t.elapsed().as_secs_f64()))
}

fn per_sample4(logits: &Tensor<f32>, i: usize) -> Tensor<f32> {
    let k = logits.shape()[1];
    Tensor::new([1, k], logits.data()[i * k..(i + 1) * k].to_vec()).unwrap()
}

fn se_at(hooks: &[&str]) -> Vec<(String, AttentionKind)> {
    hooks.iter().map(|h| (h.to_string(), AttentionKind::Se)).collect()
}

fn sa_at(hooks: &[&str]) -> Vec<(String, AttentionKind)> {
    hooks.iter().map(|h| (h.to_string(), AttentionKind::Sa)).collect()
}

fn sorted(mut v: Vec<(String, AttentionKind)>) -> Vec<(String, AttentionKind)> {
    v.sort_by(|a, b| (&a.0, a.1 as u8).cmp(&(&b.0, b.1 as u8)));
    v
}

fn canonical_fidelity() -> Outcome {
    let mut checked = 0;
    for f in Family::ALL {
        let (v2, v3): (Vec<_>, Vec<_>) = match f {
            Family::VggMini => {
                let v2 = se_at(&["b3.last", "b4.last", "b5.last"]);
                (v2.clone(), [v2, sa_at(&["b1.last", "b2.last"])].concat())
            }
            Family::ResNetMini => {
                let ends = ["layer2.end", "layer3.end", "layer4.end"];
                (se_at(&ends), [se_at(&ends), sa_at(&ends)].concat())
            }
            Family::InceptionMini => {
                let v2 = se_at(&["incepC.end", "incepD.end", "incepE.end"]);
                (v2.clone(), [v2, sa_at(&["incepB.end", "pre_gap"])].concat())
            }
            Family::DenseNetMini => {
                let v2 = se_at(&["dense2.end", "dense3.end", "dense4.end"]);
                (v2.clone(), [v2, sa_at(&["trans1.end", "trans2.end", "trans3.end", "pre_gap"])].concat())
            }
            Family::EfficientNetMini => {
                let v2 = se_at(&["stage2.end", "stage3.end", "stage4.end"]);
                (v2.clone(), [v2, sa_at(&["stage3.end"])].concat())
            }
        };
        let expected_counts = match f {
            Family::VggMini => (3, 2),
            Family::ResNetMini => (3, 3),
            Family::InceptionMini => (3, 2),
            Family::DenseNetMini => (3, 4),
            Family::EfficientNetMini => (3, 1),
        };
        for scale in [Scale::Toy, Scale::Paper] {
            let plans = canonical_plans(f, scale);
            let model = build_backbone::<f32>(f, scale, 4, 0).map_err(|e| e.to_string())?;
            let pairs = |p: &PlacementPlan| sorted(p.insertions.iter().map(|i| (i.hook.clone(), i.kind())).collect());
            ensure!(plans.baseline.is_empty(), "{f}: baseline is not empty");
            ensure!(pairs(&plans.v2_selective_se) == sorted(v2.clone()), "{f} {scale}: v2 insertions differ");
            ensure!(pairs(&plans.v3_hybrid) == sorted(v3.clone()), "{f} {scale}: v3 insertions differ");
            let v3c = (plans.v3_hybrid.count(AttentionKind::Se), plans.v3_hybrid.count(AttentionKind::Sa));
            ensure!(v3c == expected_counts, "{f} {scale}: v3 has {v3c:?}");
            ensure!(plans.v2_selective_se.count(AttentionKind::Se) == 3, "{f}: v2 SE count");

            // v1 puts one SE at every per-layer hook of its kind
            let v1_hooks: Vec<&str> = plans.v1_global_se.insertions.iter().map(|i| i.hook.as_str()).collect();
            let rule: fn(&str) -> bool = match f {
                Family::VggMini => |h| h.contains(".conv"),
                Family::ResNetMini => |h| h.ends_with(".inner"),
                Family::InceptionMini => |h| h.starts_with("incep"),
                Family::DenseNetMini => |h| h.starts_with("dense"),
                Family::EfficientNetMini => |h| h.ends_with(".post_dw"),
            };
            let want: Vec<&str> = model.hooks().iter().map(|h| h.name.as_str()).filter(|h| rule(h)).collect();
            ensure!(v1_hooks == want, "{f} {scale}: v1 hooks {v1_hooks:?}");
            ensure!(plans.v1_global_se.count(AttentionKind::Sa) == 0, "{f}: v1 has SA");
            for (name, p) in plans.iter() {
                validate_plan(p, &model).map_err(|e| format!("{f} {scale} {name}: {e}"))?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} plans validated, v2/v3 insertions match the tables"))
}

fn overhead_ordering() -> Outcome {
    let mut rows = 0;
    for f in Family::ALL {
        for scale in [Scale::Toy, Scale::Paper] {
            let base = build_backbone::<f32>(f, scale, 4, 0).map_err(|e| e.to_string())?;
            let plans = canonical_plans(f, scale);
            let shape = [1, 3, base.input_size(), base.input_size()];
            let ov = |p: &PlacementPlan| attnforge::attention::attention_overhead(&base, p, &shape).map(|r| r.params_added);
            let (o1, o2) = (ov(&plans.v1_global_se).map_err(|e| e.to_string())?, ov(&plans.v2_selective_se).map_err(|e| e.to_string())?);
            ensure!(o2 < o1, "{f} {scale}: v2 adds {o2}, v1 adds {o1}");
            for (name, p) in plans.iter() {
                let m = base.attach_attention(p).map_err(|e| e.to_string())?;
                let mut closed = 0;
                for ins in &p.insertions {
                    closed += match ins.module {
                        ModuleSpec::Se { reduction } => se_param_count(base.hook(&ins.hook).unwrap().channels, reduction),
                        ModuleSpec::Sa { kernel } => {
                            ensure!(kernel == 7, "{f} {name}: SA kernel {kernel}");
                            sa_param_count(kernel)
                        }
                    };
                }
                let sa = p.count(AttentionKind::Sa);
                let se_sum: usize = p
                    .insertions
                    .iter()
                    .filter_map(|i| match i.module {
                        ModuleSpec::Se { reduction } => Some(se_param_count(base.hook(&i.hook).unwrap().channels, reduction)),
                        _ => None,
                    })
                    .sum();
                ensure!(closed == se_sum + 99 * sa, "{f} {name}: closed form mismatch");
                let got = m.count_params(Some(ParamGroup::Attention));
                ensure!(got == closed && ov(p).unwrap() == closed, "{f} {scale} {name}: {got} attention params, closed form {closed}");
                rows += 1;
            }
        }
    }
    Ok(format!("{rows} family/scale/plan rows, v2 < v1 everywhere"))
}

fn optimizer_scheduler() -> Outcome {
    // closed form of step decay
    let mut distinct: Vec<f64> = Vec::new();
    for e in 0..60 {
        for base in [1e-4, 6e-4] {
            let want = base * 0.1f64.powi((e / 10) as i32);
            let lr = steplr_lr(base, e);
            ensure!(((lr - want) / want).abs() < 1e-12, "epoch {e}: {lr} vs {want}");
        }
        let r = steplr_lr(6e-4, e) / steplr_lr(1e-4, e);
        ensure!((r - 6.0).abs() < 1e-9, "epoch {e}: group ratio {r}");
        let lr = steplr_lr(1e-4, e);
        if !distinct.iter().any(|d| ((d - lr) / lr).abs() < 1e-12) {
            distinct.push(lr);
        }
    }
    // one value per 10-epoch window of 0..59
    ensure!(distinct.len() == 60_usize.div_ceil(10), "{} distinct values", distinct.len());

    // first Adam step has magnitude lr * |g| / (|g| + eps)
    let mut worst: f64 = 0.0;
    for (g, lr) in [(1.0, 1e-4), (-2.5, 6e-4), (1e-3, 1e-4), (40.0, 6e-4)] {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("p", ParamGroup::Backbone, Tensor::scalar(0.0)).unwrap();
        s.get_mut(id).grad = Some(Tensor::scalar(g));
        adam_update(&mut s, &mut AdamState::new(), |_| lr, 0.0).map_err(|e| e.to_string())?;
        let step = s.get(id).value.item().abs();
        let want = lr * g.abs() / (g.abs() + ADAM_EPS);
        worst = worst.max(((step - want) / want).abs());
    }
    ensure!(worst < 1e-9, "first Adam step rel err {worst:e}");

    // flat accuracy after the best epoch
    for best in [0, 3, 17] {
        let mut es = EarlyStopping::new(20);
        let mut stop = None;
        for e in 0..200 {
            let acc = if e <= best { 0.01 * (e + 1) as f64 } else { 0.01 * (best + 1) as f64 };
            if es.update(e, acc).map_err(|e| e.to_string())?.1 == StopDecision::Stop {
                stop = Some(e);
                break;
            }
        }
        ensure!(stop == Some(best + 20), "best {best}: stopped at {stop:?}");
    }
    Ok(format!("{} lr values over 60 epochs, Adam rel err {worst:.1e}, stop at best+20", distinct.len()))
}

fn metrics_oracle() -> Outcome {
    let cm = ConfusionMatrix { counts: vec![vec![50, 10], vec![5, 35]], class_names: vec!["a".into(), "b".into()] };
    let prf = precision_recall_f1(&cm);
    let (p0, r0) = (50.0 / 55.0, 50.0 / 60.0);
    let (p1, r1) = (35.0 / 45.0, 35.0 / 40.0);
    let f = |p: f64, r: f64| 2.0 * p * r / (p + r);
    let close = |a: f64, b: f64| (a - b).abs() < 1e-6;
    ensure!(close(cm.accuracy(), 0.85), "accuracy {}", cm.accuracy());
    ensure!(close(prf.per_class[0].precision, p0) && close(prf.per_class[0].recall, r0), "class 0 P/R");
    ensure!(close(prf.per_class[1].precision, p1) && close(prf.per_class[1].recall, r1), "class 1 P/R");
    ensure!(close(prf.per_class[0].f1, f(p0, r0)) && close(prf.per_class[1].f1, f(p1, r1)), "per-class F1");
    ensure!(close(prf.macro_precision, (p0 + p1) / 2.0), "macro P");
    ensure!(close(prf.macro_recall, (r0 + r1) / 2.0), "macro R");
    ensure!(close(prf.macro_f1, (f(p0, r0) + f(p1, r1)) / 2.0), "macro F1");

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for i in 0..20 {
        let k = rng.gen_range(2..8);
        let counts: Vec<Vec<u64>> = (0..k).map(|_| (0..k).map(|_| rng.gen_range(0..30)).collect()).collect();
        let cm = ConfusionMatrix { counts, class_names: (0..k).map(|c| c.to_string()).collect() };
        let (p, r) = micro_precision_recall(&cm);
        ensure!(p == r && r == cm.accuracy(), "matrix {i}: micro P {p}, micro R {r}, accuracy {}", cm.accuracy());
    }
    Ok("fixture matches hand values, micro P = R = accuracy on 20 random matrices".into())
}

struct E2eRun {
    seed: u64,
    train: Dataset,
    test: Dataset,
    outcome: TrainOutcome,
    probe: f64,
    secs: f64,
}

fn e2e_config(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 40, seed, ..TrainConfig::default() }
}

fn e2e_model(seed: u64) -> ModelGraph<f32> {
    let plan = canonical_plans(Family::VggMini, Scale::Toy).v3_hybrid;
    build_backbone(Family::VggMini, Scale::Toy, 4, seed).unwrap().attach_attention(&plan).unwrap()
}

static E2E: OnceLock<Result<E2eRun, String>> = OnceLock::new();

fn e2e() -> &'static Result<E2eRun, String> {
    E2E.get_or_init(|| {
        let (train_set, test_set) = gen_synthetic(200, 32, 0).map_err(|e| e.to_string())?;
        let probe = linear_probe(&train_set, &test_set, 100, 1e-3, 0).map_err(|e| e.to_string())?;
        let mut last = String::new();
        for seed in [0, 1, 2, 3] {
            let t = Instant::now();
            let mut m = e2e_model(seed);
            let outcome = train(&mut m, &train_set, &test_set, &e2e_config(seed), |_| {}).map_err(|e| e.to_string())?;
            let acc = outcome.log.best().eval_accuracy;
            let secs = t.elapsed().as_secs_f64();
            if acc >= 0.90 && acc > probe {
                return Ok(E2eRun { seed, train: train_set, test: test_set, outcome, probe, secs });
            }
            last = format!("seed {seed}: accuracy {acc:.4}, probe {probe:.4}");
        }
        Err(last)
    })
}

fn end_to_end() -> Outcome {
    let run = e2e().as_ref().map_err(|e| e.clone())?;
    let best = run.outcome.log.best();
    ensure!(run.probe <= 0.90, "linear probe reaches {:.4}", run.probe);
    ensure!(run.outcome.log.records.len() <= 40, "ran {} epochs", run.outcome.log.records.len());
    ensure!(run.secs < 600.0, "took {:.0}s", run.secs);
    Ok(format!(
        "seed {}: best accuracy {:.4} at epoch {}, probe {:.4}, {} epochs, {:.0}s",
        run.seed,
        best.eval_accuracy,
        best.epoch,
        run.probe,
        run.outcome.log.records.len(),
        run.secs
    ))
}

fn determinism() -> Outcome {
    let run = e2e().as_ref().map_err(|e| format!("no end-to-end run to repeat: {e}"))?;
    let mut m = e2e_model(run.seed);
    let again = train(&mut m, &run.train, &run.test, &e2e_config(run.seed), |_| {}).map_err(|e| e.to_string())?;
    ensure!(again.log.to_csv() == run.outcome.log.to_csv(), "train log CSV differs");
    ensure!(again.log.to_json() == run.outcome.log.to_json(), "train log JSON differs");
    ensure!(again.best_checkpoint == run.outcome.best_checkpoint, "checkpoint bytes differ");
    Ok(format!("log and {}-byte checkpoint identical across runs", again.best_checkpoint.len()))
}

fn round_trips() -> Outcome {
    let mut plans = 0;
    for f in Family::ALL {
        for scale in [Scale::Toy, Scale::Paper] {
            for (name, p) in canonical_plans(f, scale).iter() {
                let once = parse_plan(&p.serialize()).map_err(|e| format!("{f} {name}: {e}"))?;
                let twice = parse_plan(&once.serialize()).map_err(|e| format!("{f} {name}: {e}"))?;
                ensure!(&once == p && twice == once, "{f} {scale} {name}: plan changed");
                plans += 1;
            }
        }
    }

    let (tr, te) = gen_synthetic(10, 32, 4).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for ds in [&tr, &te] {
        let path = dir.path().join("set.atnd");
        attnforge::data::save_raw_dataset(ds, &path).map_err(|e| e.to_string())?;
        let back = attnforge::data::load_raw_dataset(&path, ds.split).map_err(|e| e.to_string())?;
        ensure!(&back == ds, "raw dataset changed");
        ensure!(raw_to_bytes(&raw_from_bytes(&raw_to_bytes(ds), ds.split).unwrap()) == raw_to_bytes(ds), "raw bytes changed");
    }

    let run = e2e().as_ref().map_err(|e| format!("no trained checkpoint: {e}"))?;
    let path = dir.path().join("best.atnf");
    std::fs::write(&path, &run.outcome.best_checkpoint).map_err(|e| e.to_string())?;
    let loaded = checkpoint::load::<f32>(&path).map_err(|e| e.to_string())?;
    let acc = evaluate(&loaded, &run.test, "v3").map_err(|e| e.to_string())?.accuracy;
    let best = run.outcome.log.best().eval_accuracy;
    ensure!(acc.to_bits() == best.to_bits(), "reloaded accuracy {acc} vs logged {best}");
    let resaved = checkpoint::to_bytes(&loaded);
    ensure!(resaved == run.outcome.best_checkpoint, "checkpoint bytes changed on resave");
    Ok(format!("{plans} plans, raw datasets, checkpoint -> evaluate = {best:.4}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("paper-results disclaimer", disclaimer),
        ("gradient suite", gradient_suite),
        ("conv oracle", conv_oracle),
        ("attention invariants", attention_invariants),
        ("canonical-plan fidelity", canonical_fidelity),
        ("overhead ordering", overhead_ordering),
        ("optimizer/scheduler exactness", optimizer_scheduler),
        ("metrics oracle", metrics_oracle),
        ("end-to-end learning", end_to_end),
        ("determinism", determinism),
        ("round trips", round_trips),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
