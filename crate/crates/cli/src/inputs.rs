//! Resolving plan and data arguments.

use std::fs;
use std::path::Path;

use attnforge::backbone::{Family, Scale};
use attnforge::data::{gen_synthetic, load_image_dataset, load_raw_dataset, AugmentMode, Dataset, Split};
use attnforge::plan::{canonical_plans, parse_plan, PlacementPlan, CANONICAL_NAMES};

use crate::Failure;

/// `ATNF_THREADS`, default 1. Kernels are single-threaded, so any valid value
/// runs on one thread; invalid values are still rejected.
pub fn thread_count() -> Result<usize, Failure> {
    match std::env::var("ATNF_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Failure::Usage(format!("ATNF_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

/// A plan plus the short name used in reports.
pub struct ResolvedPlan {
    pub plan: PlacementPlan,
    pub name: String,
}

pub fn resolve_plan(spec: &str, family: Family, scale: Scale) -> Result<ResolvedPlan, Failure> {
    if let Some(name) = spec.strip_prefix("canonical:") {
        let plans = canonical_plans(family, scale);
        let plan = plans.get(name).cloned().ok_or_else(|| {
            Failure::Usage(format!("unknown canonical plan `{name}`; valid names: {}", CANONICAL_NAMES.join(", ")))
        })?;
        // `v1_global_se` and friends report as `v1`
        let short = name.split('_').next().unwrap_or(name);
        return Ok(ResolvedPlan { plan, name: short.to_string() });
    }
    let path = Path::new(spec);
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read plan file {spec}: {e}")))?;
    let plan = parse_plan(&text).map_err(|e| Failure::Usage(format!("{spec}: {e}")))?;
    if plan.family != family {
        return Err(Failure::Usage(format!("plan {spec} is for {} but --family is {family}", plan.family)));
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| spec.to_string());
    Ok(ResolvedPlan { plan, name })
}

pub fn parse_augment(s: &str) -> Result<AugmentMode, Failure> {
    match s {
        "none" => Ok(AugmentMode::None),
        "dihedral8" => Ok(AugmentMode::Dihedral8),
        "random_rot_flip" | "random-rot-flip" => Ok(AugmentMode::RandomRotFlip),
        _ => Err(Failure::Usage(format!("unknown augmentation `{s}` (expected none, dihedral8 or random_rot_flip)"))),
    }
}

fn missing(what: &str, spec: &str) -> Failure {
    Failure::Usage(format!("{what} `{spec}` does not exist"))
}

/// A single set from a raw file or a class-per-directory tree.
fn load_one(spec: &str, size: usize, classes: Option<usize>, split: Split) -> Result<Dataset, Failure> {
    let path = Path::new(spec);
    if !path.exists() {
        return Err(missing("data path", spec));
    }
    let ds = if path.is_file() {
        load_raw_dataset(path, split)?
    } else {
        load_image_dataset(path, size, classes, split)?
    };
    if let Some(k) = classes {
        if ds.num_classes() != k {
            return Err(Failure::Usage(format!("{spec} has {} classes but the model has {k}", ds.num_classes())));
        }
    }
    Ok(ds)
}

/// The directory layout's file or subdirectory for `split`, if present.
fn split_member(dir: &Path, split: Split) -> Option<String> {
    let stem = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let raw = dir.join(format!("{stem}.atnd"));
    if raw.is_file() {
        return Some(raw.to_string_lossy().into_owned());
    }
    let sub = dir.join(stem);
    sub.is_dir().then(|| sub.to_string_lossy().into_owned())
}

/// Training and evaluation sets for `train`.
pub fn train_sets(
    data: &str,
    eval_data: Option<&str>,
    size: usize,
    n_per_class: usize,
    seed: u64,
) -> Result<(Dataset, Dataset), Failure> {
    if data == "synthetic" {
        let (tr, te) = gen_synthetic(n_per_class, size, seed)?;
        return match eval_data {
            None => Ok((tr, te)),
            Some(e) => Ok((tr, load_one(e, size, Some(4), Split::Test)?)),
        };
    }
    let path = Path::new(data);
    if !path.exists() {
        return Err(missing("data path", data));
    }
    let paired = path.is_dir().then(|| (split_member(path, Split::Train), split_member(path, Split::Test)));
    let (train_spec, test_spec) = match paired {
        Some((Some(tr), Some(te))) => (tr, Some(te)),
        _ => (data.to_string(), None),
    };
    let train = load_one(&train_spec, size, None, Split::Train)?;
    let test_spec = match (eval_data, test_spec) {
        (Some(e), _) => e.to_string(),
        (None, Some(t)) => t,
        (None, None) => {
            return Err(Failure::Usage(format!(
                "{data} holds a single dataset; pass --eval-data, or use a directory with train/test members"
            )))
        }
    };
    let test = load_one(&test_spec, size, Some(train.num_classes()), Split::Test)?;
    Ok((train, test))
}

/// Evaluation set for `eval`. Directories with a test member use it.
pub fn eval_set(data: &str, size: usize, classes: usize, n_per_class: usize, seed: u64) -> Result<Dataset, Failure> {
    if data == "synthetic" {
        let (_, te) = gen_synthetic(n_per_class, size, seed)?;
        if classes != te.num_classes() {
            return Err(Failure::Usage(format!(
                "synthetic data has {} classes but the model has {classes}",
                te.num_classes()
            )));
        }
        return Ok(te);
    }
    let path = Path::new(data);
    if !path.exists() {
        return Err(missing("data path", data));
    }
    let spec = if path.is_dir() { split_member(path, Split::Test) } else { None }.unwrap_or_else(|| data.to_string());
    load_one(&spec, size, Some(classes), Split::Test)
}
