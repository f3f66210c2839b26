//! Attention placement plans and their line-oriented text format.
//!
//! ```text
//! # comments run to end of line
//! family = vgg_mini
//! attach SA at b1.last with k=7
//! attach SE at b3.last with r=16
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionKind, DEFAULT_REDUCTION, DEFAULT_SA_KERNEL};
use crate::backbone::{hook_names, Family, ModelGraph, Scale};
use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanErrorKind {
    Syntax,
    UnknownKey,
    UnknownHook,
    DuplicateInsertion,
    BadValue,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {column}: {kind:?}: {message}")]
pub struct PlanParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
    pub kind: PlanErrorKind,
}

impl PlanParseError {
    fn new(kind: PlanErrorKind, line: usize, column: usize, message: impl Into<String>) -> Self {
        Self { line, column, message: message.into(), kind }
    }
}

/// Per-module hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModuleSpec {
    Se { reduction: usize },
    Sa { kernel: usize },
}

impl ModuleSpec {
    pub fn se() -> Self {
        ModuleSpec::Se { reduction: DEFAULT_REDUCTION }
    }

    pub fn sa() -> Self {
        ModuleSpec::Sa { kernel: DEFAULT_SA_KERNEL }
    }

    pub fn kind(&self) -> AttentionKind {
        match self {
            ModuleSpec::Se { .. } => AttentionKind::Se,
            ModuleSpec::Sa { .. } => AttentionKind::Sa,
        }
    }
}

/// One `attach` line. The source position is kept for diagnostics and does
/// not take part in equality.
#[derive(Debug, Clone, Eq, Serialize, Deserialize)]
pub struct Insertion {
    pub hook: String,
    pub module: ModuleSpec,
    #[serde(skip)]
    pub span: Option<(usize, usize)>,
}

impl PartialEq for Insertion {
    fn eq(&self, other: &Self) -> bool {
        self.hook == other.hook && self.module == other.module
    }
}

impl Insertion {
    pub fn new(hook: impl Into<String>, module: ModuleSpec) -> Self {
        Self { hook: hook.into(), module, span: None }
    }

    pub fn kind(&self) -> AttentionKind {
        self.module.kind()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub family: Family,
    pub insertions: Vec<Insertion>,
}

impl PlacementPlan {
    pub fn baseline(family: Family) -> Self {
        Self { family, insertions: Vec::new() }
    }

    /// Build from insertions, rejecting duplicates and normalizing order.
    pub fn new(family: Family, insertions: Vec<Insertion>) -> Result<Self, PlanParseError> {
        let mut plan = Self { family, insertions };
        plan.check_duplicates()?;
        plan.normalize();
        Ok(plan)
    }

    pub fn is_empty(&self) -> bool {
        self.insertions.is_empty()
    }

    pub fn count(&self, kind: AttentionKind) -> usize {
        self.insertions.iter().filter(|i| i.kind() == kind).count()
    }

    fn check_duplicates(&self) -> Result<(), PlanParseError> {
        for (i, a) in self.insertions.iter().enumerate() {
            if self.insertions[..i].iter().any(|b| b.hook == a.hook && b.kind() == a.kind()) {
                let (line, column) = a.span.unwrap_or((0, 0));
                return Err(PlanParseError::new(
                    PlanErrorKind::DuplicateInsertion,
                    line,
                    column,
                    format!("{} is already attached at `{}`", a.kind(), a.hook),
                ));
            }
        }
        Ok(())
    }

    /// Stable sort into hook execution order; insertions at the same hook keep
    /// their relative order.
    fn normalize(&mut self) {
        let family = self.family;
        self.insertions.sort_by_cached_key(|i| hook_order_key(family, &i.hook));
    }

    /// Text form: the `family` line, then one fully explicit `attach` line per
    /// insertion.
    pub fn serialize(&self) -> String {
        let mut out = format!("family = {}\n", self.family);
        for ins in &self.insertions {
            let with = match ins.module {
                ModuleSpec::Se { reduction } => format!("r={reduction}"),
                ModuleSpec::Sa { kernel } => format!("k={kernel}"),
            };
            out.push_str(&format!("attach {} at {} with {}\n", ins.kind(), ins.hook, with));
        }
        out
    }
}

impl fmt::Display for PlacementPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

/// Position of a hook in execution order, derived from the hook-name grammar.
/// Names that do not fit the grammar sort last.
fn hook_order_key(family: Family, hook: &str) -> (u32, u32, u32) {
    const LAST: u32 = u32::MAX;
    let num = |s: &str, prefix: &str| s.strip_prefix(prefix).and_then(|d| d.parse::<u32>().ok());
    let parts: Vec<&str> = hook.split('.').collect();
    let key = match (family, parts.as_slice()) {
        (Family::VggMini, [b, "last"]) => num(b, "b").map(|i| (i, LAST, 0)),
        (Family::VggMini, [b, c]) => num(b, "b").zip(num(c, "conv")).map(|(i, j)| (i, j, 0)),
        (Family::ResNetMini, [l, "end"]) => num(l, "layer").map(|i| (i, LAST, 0)),
        (Family::ResNetMini, [l, b, "inner"]) => num(l, "layer").zip(num(b, "block")).map(|(i, j)| (i, j, 0)),
        (Family::InceptionMini, ["pre_gap"]) => Some((LAST, 0, 0)),
        (Family::InceptionMini, [m, "end"]) => m
            .strip_prefix("incep")
            .filter(|l| l.len() == 1 && ("A"..="E").contains(l))
            .map(|l| (l.as_bytes()[0] as u32 - b'A' as u32 + 1, 0, 0)),
        (Family::DenseNetMini, ["pre_gap"]) => Some((LAST, 0, 0)),
        (Family::DenseNetMini, [d, "end"]) => num(d, "dense")
            .map(|i| (2 * i, 0, 0))
            .or_else(|| num(d, "trans").map(|i| (2 * i + 1, 0, 0))),
        (Family::EfficientNetMini, [s, "end"]) => num(s, "stage").map(|i| (i, LAST, 0)),
        (Family::EfficientNetMini, [s, m, "post_dw"]) => num(s, "stage").zip(num(m, "mbconv")).map(|(i, j)| (i, j, 0)),
        _ => None,
    };
    key.unwrap_or((LAST, LAST, LAST))
}

struct Token<'a> {
    text: &'a str,
    col: usize,
}

fn tokenize(line: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(Token { text: &line[s..i], col: line[..s].chars().count() + 1 });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(Token { text: &line[s..], col: line[..s].chars().count() + 1 });
    }
    out
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn is_hook_name(s: &str) -> bool {
    !s.is_empty()
        && s.split('.').all(|p| !p.is_empty() && p.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
}

/// Structural parse. Hook existence is checked by [`validate_plan`].
pub fn parse_plan(text: &str) -> Result<PlacementPlan, PlanParseError> {
    use PlanErrorKind::*;
    let mut family: Option<Family> = None;
    let mut insertions: Vec<Insertion> = Vec::new();
    let mut last_line = 1;
    for (idx, raw) in text.split('\n').enumerate() {
        let line_no = idx + 1;
        last_line = line_no;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        let line = raw.split('#').next().unwrap_or("");
        let tokens = tokenize(line);
        let Some(first) = tokens.first() else { continue };

        if first.text == "family" || first.text.starts_with("family=") {
            if family.is_some() {
                return Err(PlanParseError::new(Syntax, line_no, first.col, "`family` declared more than once"));
            }
            let after = &line[line.find("family").unwrap() + "family".len()..];
            let eq_off = line.len() - after.len();
            let after_trim = after.trim_start();
            let Some(rest) = after_trim.strip_prefix('=') else {
                let col = line[..eq_off].chars().count() + 1 + (after.len() - after_trim.len());
                return Err(PlanParseError::new(Syntax, line_no, col, "expected `=` after `family`"));
            };
            let value = rest.trim();
            let value_col = line.len() - rest.trim_start().len();
            let value_col = line[..value_col].chars().count() + 1;
            if value.is_empty() || !is_identifier(value) {
                return Err(PlanParseError::new(Syntax, line_no, value_col, "expected a family identifier"));
            }
            let fam = value.parse::<Family>().map_err(|e| PlanParseError::new(BadValue, line_no, value_col, e))?;
            family = Some(fam);
            continue;
        }

        if family.is_none() {
            return Err(PlanParseError::new(
                Syntax,
                line_no,
                first.col,
                "the first statement must be `family = <identifier>`",
            ));
        }
        if first.text != "attach" {
            return Err(PlanParseError::new(
                Syntax,
                line_no,
                first.col,
                format!("unexpected `{}`; expected `attach`", first.text),
            ));
        }
        let expect = |i: usize, what: &str| -> Result<&Token<'_>, PlanParseError> {
            tokens.get(i).ok_or_else(|| {
                PlanParseError::new(Syntax, line_no, line.trim_end().chars().count() + 1, format!("expected {what}"))
            })
        };
        let kind_tok = expect(1, "`SE` or `SA`")?;
        let kind: AttentionKind = kind_tok
            .text
            .parse()
            .map_err(|e: String| PlanParseError::new(Syntax, line_no, kind_tok.col, e))?;
        let at = expect(2, "`at`")?;
        if at.text != "at" {
            return Err(PlanParseError::new(Syntax, line_no, at.col, format!("expected `at`, found `{}`", at.text)));
        }
        let hook_tok = expect(3, "a hook name")?;
        if !is_hook_name(hook_tok.text) {
            return Err(PlanParseError::new(
                Syntax,
                line_no,
                hook_tok.col,
                format!("`{}` is not a valid hook name", hook_tok.text),
            ));
        }
        let mut module = match kind {
            AttentionKind::Se => ModuleSpec::se(),
            AttentionKind::Sa => ModuleSpec::sa(),
        };
        if let Some(with) = tokens.get(4) {
            if with.text != "with" {
                return Err(PlanParseError::new(
                    Syntax,
                    line_no,
                    with.col,
                    format!("expected `with` or end of line, found `{}`", with.text),
                ));
            }
            let kv = expect(5, "`key=value`")?;
            let Some((key, value)) = kv.text.split_once('=') else {
                return Err(PlanParseError::new(Syntax, line_no, kv.col, "expected `key=value`"));
            };
            let value_col = kv.col + key.chars().count() + 1;
            let expected_key = match kind {
                AttentionKind::Se => "r",
                AttentionKind::Sa => "k",
            };
            if key != expected_key {
                return Err(PlanParseError::new(
                    UnknownKey,
                    line_no,
                    kv.col,
                    format!("{kind} accepts only `{expected_key}`, found `{key}`"),
                ));
            }
            let v: usize = value
                .parse()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| PlanParseError::new(BadValue, line_no, value_col, format!("`{value}` is not a positive integer")))?;
            module = match kind {
                AttentionKind::Se => ModuleSpec::Se { reduction: v },
                AttentionKind::Sa => {
                    if v % 2 == 0 {
                        return Err(PlanParseError::new(BadValue, line_no, value_col, "SA kernel size must be odd"));
                    }
                    ModuleSpec::Sa { kernel: v }
                }
            };
            if let Some(extra) = tokens.get(6) {
                return Err(PlanParseError::new(
                    Syntax,
                    line_no,
                    extra.col,
                    format!("unexpected `{}` after parameters", extra.text),
                ));
            }
        }
        let ins = Insertion { hook: hook_tok.text.to_string(), module, span: Some((line_no, first.col)) };
        if insertions.iter().any(|o| o.hook == ins.hook && o.kind() == ins.kind()) {
            return Err(PlanParseError::new(
                DuplicateInsertion,
                line_no,
                first.col,
                format!("{} is already attached at `{}`", ins.kind(), ins.hook),
            ));
        }
        insertions.push(ins);
    }
    let Some(family) = family else {
        let _ = last_line;
        return Err(PlanParseError::new(Syntax, 1, 1, "missing `family = <identifier>` line"));
    };
    PlacementPlan::new(family, insertions)
}

/// Check every insertion against the model's hook points.
pub fn validate_plan<T: Float>(plan: &PlacementPlan, model: &ModelGraph<T>) -> Result<(), PlanParseError> {
    if plan.family != model.family() {
        return Err(PlanParseError::new(
            PlanErrorKind::BadValue,
            1,
            1,
            format!("plan is for {} but the model is {}", plan.family, model.family()),
        ));
    }
    plan.check_duplicates()?;
    for ins in &plan.insertions {
        if model.hook(&ins.hook).is_none() {
            let (line, column) = ins.span.unwrap_or((0, 0));
            return Err(PlanParseError::new(
                PlanErrorKind::UnknownHook,
                line,
                column,
                format!("`{}` is not a hook of {} ({} scale)", ins.hook, model.family(), model.scale()),
            ));
        }
    }
    Ok(())
}

/// Canonical plan names, in experimental-phase order.
pub const CANONICAL_NAMES: [&str; 4] = ["baseline", "v1", "v2", "v3"];

/// The four placement variants of one family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanonicalPlans {
    pub baseline: PlacementPlan,
    pub v1_global_se: PlacementPlan,
    pub v2_selective_se: PlacementPlan,
    pub v3_hybrid: PlacementPlan,
}

impl CanonicalPlans {
    /// Look up by `baseline`, `v1`, `v2` or `v3`.
    pub fn get(&self, name: &str) -> Option<&PlacementPlan> {
        match name {
            "baseline" => Some(&self.baseline),
            "v1" | "v1_global_se" => Some(&self.v1_global_se),
            "v2" | "v2_selective_se" => Some(&self.v2_selective_se),
            "v3" | "v3_hybrid" => Some(&self.v3_hybrid),
            _ => None,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &PlacementPlan)> {
        CANONICAL_NAMES.into_iter().zip([&self.baseline, &self.v1_global_se, &self.v2_selective_se, &self.v3_hybrid])
    }
}

fn build(family: Family, items: Vec<(String, ModuleSpec)>) -> PlacementPlan {
    let ins = items.into_iter().map(|(h, m)| Insertion::new(h, m)).collect();
    PlacementPlan::new(family, ins).expect("canonical plans have no duplicates")
}

/// The baseline, global-SE, selective-SE and hybrid plans of a family. Global
/// SE enumerates every per-layer hook, so it depends on the scale.
pub fn canonical_plans(family: Family, scale: Scale) -> CanonicalPlans {
    let se = ModuleSpec::se;
    let sa = ModuleSpec::sa;
    let hooks = hook_names(family, scale);
    let every = |suffix_match: &dyn Fn(&str) -> bool| -> Vec<(String, ModuleSpec)> {
        hooks.iter().filter(|h| suffix_match(h)).map(|h| (h.clone(), se())).collect()
    };
    let named = |names: &[&str], m: fn() -> ModuleSpec| -> Vec<(String, ModuleSpec)> {
        names.iter().map(|n| (n.to_string(), m())).collect()
    };
    let (v1, v2, v3) = match family {
        Family::VggMini => {
            let v2 = named(&["b3.last", "b4.last", "b5.last"], se);
            let mut v3 = named(&["b1.last", "b2.last"], sa);
            v3.extend(v2.clone());
            (every(&|h| h.contains(".conv")), v2, v3)
        }
        Family::ResNetMini => {
            let ends = ["layer2.end", "layer3.end", "layer4.end"];
            let v3 = ends.iter().flat_map(|&h| [(h.to_string(), se()), (h.to_string(), sa())]).collect();
            (every(&|h| h.ends_with(".inner")), named(&ends, se), v3)
        }
        Family::InceptionMini => {
            let v2 = named(&["incepC.end", "incepD.end", "incepE.end"], se);
            let mut v3 = v2.clone();
            v3.extend(named(&["incepB.end", "pre_gap"], sa));
            (every(&|h| h.starts_with("incep")), v2, v3)
        }
        Family::DenseNetMini => {
            let v2 = named(&["dense2.end", "dense3.end", "dense4.end"], se);
            let mut v3 = v2.clone();
            v3.extend(named(&["trans1.end", "trans2.end", "trans3.end", "pre_gap"], sa));
            (every(&|h| h.starts_with("dense")), v2, v3)
        }
        Family::EfficientNetMini => {
            let v2 = named(&["stage2.end", "stage3.end", "stage4.end"], se);
            let v3 = vec![
                ("stage2.end".to_string(), se()),
                ("stage3.end".to_string(), se()),
                ("stage3.end".to_string(), sa()),
                ("stage4.end".to_string(), se()),
            ];
            (every(&|h| h.ends_with(".post_dw")), v2, v3)
        }
    };
    CanonicalPlans {
        baseline: PlacementPlan::baseline(family),
        v1_global_se: build(family, v1),
        v2_selective_se: build(family, v2),
        v3_hybrid: build(family, v3),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_only_is_baseline() {
        let p = parse_plan("family = vgg_mini").unwrap();
        assert_eq!(p.family, Family::VggMini);
        assert!(p.is_empty());
    }

    #[test]
    fn one_se_insertion() {
        let p = parse_plan("family = vgg_mini\nattach SE at b3.last with r=16").unwrap();
        assert_eq!(p.insertions, vec![Insertion::new("b3.last", ModuleSpec::Se { reduction: 16 })]);
    }

    #[test]
    fn missing_family_is_syntax_error_on_line_1() {
        let e = parse_plan("attach SE at b3.last").unwrap_err();
        assert_eq!((e.kind, e.line, e.column), (PlanErrorKind::Syntax, 1, 1));
    }

    #[test]
    fn error_kinds_and_positions() {
        let e = parse_plan("family = vgg_mini\nattach SE at b3.last with k=3").unwrap_err();
        assert_eq!((e.kind, e.line, e.column), (PlanErrorKind::UnknownKey, 2, 27));
        let e = parse_plan("family = vgg_mini\nattach SE at b3.last with r=zero").unwrap_err();
        assert_eq!((e.kind, e.line, e.column), (PlanErrorKind::BadValue, 2, 29));
        let e = parse_plan("family = vgg_mini\n  attach SE at b3.last\nattach SE at b3.last").unwrap_err();
        assert_eq!((e.kind, e.line), (PlanErrorKind::DuplicateInsertion, 3));
        let e = parse_plan("family = vgg_mini\nattach XE at b3.last").unwrap_err();
        assert_eq!((e.kind, e.column), (PlanErrorKind::Syntax, 8));
        let e = parse_plan("family = lenet").unwrap_err();
        assert_eq!((e.kind, e.column), (PlanErrorKind::BadValue, 10));
        let e = parse_plan("family = vgg_mini\nattach SA at b1.last with k=4").unwrap_err();
        assert_eq!(e.kind, PlanErrorKind::BadValue);
        let e = parse_plan("family = vgg_mini\nfamily = vgg_mini").unwrap_err();
        assert_eq!((e.kind, e.line), (PlanErrorKind::Syntax, 2));
    }

    #[test]
    fn comments_blank_lines_and_defaults() {
        let text = "# plan\n\nfamily=resnet_mini # fam\n attach SA at layer2.end   # spatial\n";
        let p = parse_plan(text).unwrap();
        assert_eq!(p.insertions[0].module, ModuleSpec::Sa { kernel: 7 });
        assert_eq!(p.insertions[0].span, Some((4, 2)));
    }

    #[test]
    fn normalization_orders_by_hook_position() {
        let p = parse_plan("family = vgg_mini\nattach SE at b5.last\nattach SA at b1.last\nattach SE at b3.conv2\n").unwrap();
        let hooks: Vec<&str> = p.insertions.iter().map(|i| i.hook.as_str()).collect();
        assert_eq!(hooks, vec!["b1.last", "b3.conv2", "b5.last"]);
        let d = parse_plan("family = densenet_mini\nattach SA at pre_gap\nattach SA at trans1.end\nattach SE at dense2.end\n").unwrap();
        let hooks: Vec<&str> = d.insertions.iter().map(|i| i.hook.as_str()).collect();
        assert_eq!(hooks, vec!["trans1.end", "dense2.end", "pre_gap"]);
    }

    #[test]
    fn same_hook_keeps_listed_order() {
        let p = parse_plan("family = resnet_mini\nattach SE at layer2.end\nattach SA at layer2.end\n").unwrap();
        assert_eq!(p.insertions[0].kind(), AttentionKind::Se);
        let q = parse_plan("family = resnet_mini\nattach SA at layer2.end\nattach SE at layer2.end\n").unwrap();
        assert_eq!(q.insertions[0].kind(), AttentionKind::Sa);
        assert_ne!(p, q);
    }

    #[test]
    fn serializer_is_explicit() {
        let p = parse_plan("family = vgg_mini\nattach SE at b3.last\nattach SA at b1.last").unwrap();
        assert_eq!(p.serialize(), "family = vgg_mini\nattach SA at b1.last with k=7\nattach SE at b3.last with r=16\n");
    }

    #[test]
    fn canonical_counts() {
        let v = canonical_plans(Family::VggMini, Scale::Toy);
        assert_eq!(v.v2_selective_se.insertions.len(), 3);
        let e = canonical_plans(Family::EfficientNetMini, Scale::Toy);
        assert_eq!(e.v3_hybrid.insertions.len(), 4);
        assert_eq!(e.v3_hybrid.count(AttentionKind::Sa), 1);
        // SA sits right after the stage-3 SE
        assert_eq!(e.v3_hybrid.insertions[2], Insertion::new("stage3.end", ModuleSpec::sa()));
        for f in Family::ALL {
            for s in [Scale::Toy, Scale::Paper] {
                assert!(canonical_plans(f, s).baseline.is_empty());
            }
        }
    }
}
