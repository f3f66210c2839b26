use std::fs;
use std::path::Path;

use serde::Serialize;

use attnforge::attention::OverheadReport;
use attnforge::backbone::{build_backbone, checkpoint, ModelGraph};
use attnforge::data::{augment, raw_to_bytes, AugmentPolicy};
use attnforge::gradcheck::{self, Settings};
use attnforge::metrics::ReportFormat;
use attnforge::param::ParamGroup;
use attnforge::plan::canonical_plans;
use attnforge::train::{evaluate, train as run_training, TrainConfig};
use attnforge::attention::attention_overhead;

use crate::inputs::{eval_set, parse_augment, resolve_plan, train_sets};
use crate::manifest::{ensure_dir, write_file, RunManifest};
use crate::{parse_targets, CmdResult, EvalArgs, Failure, GenDataArgs, GradcheckArgs, InspectArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.atnf";
pub const LOG_CSV: &str = "train_log.csv";
pub const LOG_JSON: &str = "train_log.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";

fn write_report_pair(report: &attnforge::metrics::EvalReport, dir: &Path, m: &mut RunManifest) -> CmdResult {
    for (kind, file, format) in [("report_csv", REPORT_CSV, ReportFormat::Csv), ("report_json", REPORT_JSON, ReportFormat::Json)] {
        attnforge::metrics::write_report(report, &dir.join(file), format)?;
        m.artifacts.insert(kind.into(), file.into());
    }
    Ok(())
}

pub fn train(a: &TrainArgs, argv: &[String], threads: usize) -> CmdResult {
    let family = a.model.family;
    let scale = a.model.scale;
    let plan = resolve_plan(&a.model.plan, family, scale)?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr_backbone: a.lr_backbone,
        lr_attention: a.lr_attention,
        weight_decay: a.weight_decay,
        step_size: a.step_size,
        gamma: a.gamma,
        patience: a.patience,
        seed: a.seed,
        record_wall_time: a.record_wall_time,
        ..TrainConfig::default()
    };
    config.validate()?;
    let policy = AugmentPolicy { mode: parse_augment(&a.augment)?, train_only: true };
    let size = scale.input_size();
    let (train_set, eval_data) = train_sets(&a.data, a.eval_data.as_deref(), size, a.n_per_class, a.seed)?;
    let train_set = augment(&train_set, policy, a.seed)?;
    let mut model = build_backbone::<f32>(family, scale, train_set.num_classes(), a.seed)?.attach_attention(&plan.plan)?;
    ensure_dir(&a.out)?;

    println!(
        "training {family} ({scale}, plan {}) on {} samples, evaluating on {}",
        plan.name,
        train_set.len(),
        eval_data.len()
    );
    let outcome = run_training(&mut model, &train_set, &eval_data, &config, |r| {
        println!("epoch {:>3}  loss {:.5}  eval_acc {:.4}", r.epoch, r.train_loss, r.eval_accuracy)
    })?;
    let log = &outcome.log;
    println!("best epoch {} eval_acc {:.4}{}", log.best_epoch, log.best().eval_accuracy, if log.stopped_early {
        " (stopped early)"
    } else {
        ""
    });

    let mut m = RunManifest::new("train", argv, a.seed, threads);
    m.config = serde_json::json!({
        "family": family,
        "scale": scale.to_string(),
        "plan": a.model.plan,
        "data": a.data,
        "eval_data": a.eval_data,
        "n_per_class": a.n_per_class,
        "augment": policy.mode,
        "num_classes": model.num_classes(),
        "train": config,
    });
    m.plan_text = Some(plan.plan.serialize());
    write_file(&a.out.join(CHECKPOINT_FILE), &outcome.best_checkpoint)?;
    m.artifacts.insert("checkpoint".into(), CHECKPOINT_FILE.into());
    write_file(&a.out.join(LOG_CSV), log.to_csv().as_bytes())?;
    m.artifacts.insert("train_log_csv".into(), LOG_CSV.into());
    write_file(&a.out.join(LOG_JSON), log.to_json().as_bytes())?;
    m.artifacts.insert("train_log_json".into(), LOG_JSON.into());
    let report = evaluate(&model, &eval_data, &plan.name)?;
    write_report_pair(&report, &a.out, &mut m)?;
    m.write(&a.out)?;
    print!("{}", report.summary());
    Ok(())
}

/// Canonical name of a model's plan, or `custom`.
fn plan_name<T: attnforge::tensor::Float>(model: &ModelGraph<T>) -> String {
    canonical_plans(model.family(), model.scale())
        .iter()
        .find(|(_, p)| *p == model.plan())
        .map(|(n, _)| n.to_string())
        .unwrap_or_else(|| "custom".into())
}

pub fn eval(a: &EvalArgs, argv: &[String], threads: usize) -> CmdResult {
    if !a.checkpoint.is_file() {
        return Err(Failure::Usage(format!("checkpoint {} does not exist", a.checkpoint.display())));
    }
    let bytes = fs::read(&a.checkpoint)
        .map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", a.checkpoint.display())))?;
    let model = checkpoint::from_bytes::<f32>(&bytes)
        .map_err(|e| Failure::Usage(format!("{} is not a usable checkpoint: {e}", a.checkpoint.display())))?;
    let seed = a.data_seed.unwrap_or(model.seed());
    let ds = eval_set(&a.data, model.input_size(), model.num_classes(), a.n_per_class, seed)?;
    let name = plan_name(&model);
    let report = evaluate(&model, &ds, &name)?;
    print!("{}", report.summary());
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        let mut m = RunManifest::new("eval", argv, model.seed(), threads);
        m.config = serde_json::json!({
            "checkpoint": a.checkpoint,
            "data": a.data,
            "n_per_class": a.n_per_class,
            "data_seed": seed,
        });
        m.plan_text = Some(model.plan().serialize());
        write_report_pair(&report, out, &mut m)?;
        m.write(out)?;
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CmdResult {
    if !(a.tol >= 0.0) || !(a.eps > 0.0) {
        return Err(Failure::Usage(format!("--tol must be >= 0 and --eps > 0 (got {} and {})", a.tol, a.eps)));
    }
    let targets = parse_targets(&a.target)?;
    let settings = Settings { eps: a.eps, max_coords: (a.max_coords > 0).then_some(a.max_coords) };
    let mut all_pass = true;
    for t in targets {
        let start = std::time::Instant::now();
        let report = gradcheck::run(t, a.seed, a.tol, settings)?;
        let pass = report.passed();
        all_pass &= pass;
        println!(
            "{:<6} seed {}  max_rel_err {:.3e}  coords {:>5}  {}  ({:.1}s)",
            t.to_string(),
            a.seed,
            report.max_rel_err(),
            report.checked(),
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        let mut worst: Vec<_> = report.failures().collect();
        worst.sort_by(|x, y| y.max_rel_err.total_cmp(&x.max_rel_err));
        for e in worst.iter().take(10) {
            match &e.worst {
                Some(c) => println!(
                    "  {} / {}: rel_err {:.3e} at index {} (analytic {:.6e}, numeric {:.6e})",
                    e.check, e.input, c.rel_err, c.index, c.analytic, c.numeric
                ),
                None => println!("  {} / {}: no coordinates checked", e.check, e.input),
            }
        }
    }
    if all_pass {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed at tolerance {:e}", a.tol)))
    }
}

#[derive(Serialize)]
struct HookRow {
    name: String,
    channels: usize,
    attached: Vec<String>,
}

#[derive(Serialize)]
struct InspectOutput {
    family: String,
    scale: String,
    plan: String,
    input_size: usize,
    num_classes: usize,
    hooks: Vec<HookRow>,
    params_backbone: usize,
    params_attention: usize,
    params_total: usize,
    overhead: OverheadReport,
}

pub fn inspect(a: &InspectArgs) -> CmdResult {
    let family = a.model.family;
    let scale = a.model.scale;
    let size = scale.input_size();
    if let Some(s) = a.input_size {
        if s != size {
            return Err(Failure::Usage(format!("--input-size {s} does not match the {scale} scale ({size} px)")));
        }
    }
    if a.batch == 0 {
        return Err(Failure::Usage("--batch must be at least 1".into()));
    }
    let plan = resolve_plan(&a.model.plan, family, scale)?;
    let base = build_backbone::<f32>(family, scale, 4, 0)?;
    let overhead = attention_overhead(&base, &plan.plan, &[a.batch, 3, size, size])?;
    let model = base.attach_attention(&plan.plan)?;
    let hooks = model
        .list_hook_points()
        .into_iter()
        .map(|(name, channels)| {
            let attached =
                plan.plan.insertions.iter().filter(|i| i.hook == name).map(|i| i.kind().to_string()).collect();
            HookRow { name, channels, attached }
        })
        .collect();
    let out = InspectOutput {
        family: family.to_string(),
        scale: scale.to_string(),
        plan: plan.name,
        input_size: size,
        num_classes: model.num_classes(),
        hooks,
        params_backbone: model.count_params(Some(ParamGroup::Backbone)),
        params_attention: model.count_params(Some(ParamGroup::Attention)),
        params_total: model.count_params(None),
        overhead,
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&out).expect("serializes"));
        return Ok(());
    }
    println!("{} ({}, {} px, plan {})", out.family, out.scale, out.input_size, out.plan);
    println!("{:<28} {:>8}  attention", "hook", "channels");
    for h in &out.hooks {
        println!("{:<28} {:>8}  {}", h.name, h.channels, h.attached.join("+"));
    }
    println!("params: backbone {}  attention {}  total {}", out.params_backbone, out.params_attention, out.params_total);
    println!(
        "overhead (batch {}): {} insertions, +{} params, +{} MACs",
        a.batch,
        out.overhead.breakdown.len(),
        out.overhead.params_added,
        out.overhead.flops_added
    );
    for e in &out.overhead.breakdown {
        println!("  {:<4} at {:<26} C={:<5} params {:>8}  MACs {:>12}", e.kind.to_string(), e.hook, e.channels, e.params, e.flops);
    }
    Ok(())
}

pub fn gen_data(a: &GenDataArgs, argv: &[String], threads: usize) -> CmdResult {
    let (train, test) = attnforge::data::gen_synthetic(a.n_per_class, a.size, a.seed)?;
    ensure_dir(&a.out)?;
    let mut m = RunManifest::new("gen-data", argv, a.seed, threads);
    m.config = serde_json::json!({ "n_per_class": a.n_per_class, "size": a.size });
    for (file, ds) in [("train.atnd", &train), ("test.atnd", &test)] {
        write_file(&a.out.join(file), &raw_to_bytes(ds))?;
        m.artifacts.insert(file.trim_end_matches(".atnd").into(), file.into());
    }
    m.write(&a.out)?;
    println!("wrote {} train and {} test samples to {}", train.len(), test.len(), a.out.display());
    Ok(())
}
