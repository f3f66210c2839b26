//! Confusion-matrix metrics and report files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// trace / total; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        ratio(self.trace(), self.total())
    }

    /// The same matrix with classes relabeled: new class `i` is old class
    /// `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let counts = perm.iter().map(|&r| perm.iter().map(|&c| self.counts[r][c]).collect()).collect();
        let class_names = perm.iter().map(|&i| self.class_names[i].clone()).collect();
        Self { counts, class_names }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Default class names `class0..class{K-1}`.
pub fn default_class_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class{i}")).collect()
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Usage(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= k || t >= k {
            return Err(Error::Usage(format!("class index out of range for K={k}: pred {p}, label {t}")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts, class_names: default_class_names(k) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrfSummary {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Per-class and macro-averaged precision, recall and F1. Any zero
/// denominator yields 0.
pub fn precision_recall_f1(cm: &ConfusionMatrix) -> PrfSummary {
    let k = cm.k();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = cm.counts[c][c];
            let precision = ratio(tp, cm.col_sum(c));
            let recall = ratio(tp, cm.row_sum(c));
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassMetrics { name: cm.class_names[c].clone(), precision, recall, f1, support: cm.row_sum(c) }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if k == 0 {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / k as f64
        }
    };
    PrfSummary {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
    }
}

/// Micro-averaged precision and recall (both equal accuracy for single-label
/// data).
pub fn micro_precision_recall(cm: &ConfusionMatrix) -> (f64, f64) {
    let tp = cm.trace();
    let pred_total: u64 = (0..cm.k()).map(|c| cm.col_sum(c)).sum();
    let true_total: u64 = (0..cm.k()).map(|c| cm.row_sum(c)).sum();
    (ratio(tp, pred_total), ratio(tp, true_total))
}

/// Identifies which run produced a report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub model: String,
    pub plan: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: Fingerprint,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const REPORT_CSV_HEADER: &str = "model,plan,seed,test_accuracy,precision,recall,f1";

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix, fingerprint: Fingerprint) -> Self {
        let prf = precision_recall_f1(&confusion);
        Self {
            fingerprint,
            accuracy: confusion.accuracy(),
            macro_precision: prf.macro_precision,
            macro_recall: prf.macro_recall,
            macro_f1: prf.macro_f1,
            per_class: prf.per_class,
            confusion,
        }
    }

    /// One CSV data row (no header), macro values at 4 decimals.
    pub fn csv_row(&self) -> String {
        let fp = &self.fingerprint;
        format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4}",
            csv_field(&fp.model),
            csv_field(&fp.plan),
            fp.seed,
            self.accuracy,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{REPORT_CSV_HEADER}\n{}\n", self.csv_row())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}\n",
            self.accuracy, self.macro_precision, self.macro_recall, self.macro_f1
        );
        for m in &self.per_class {
            s.push_str(&format!(
                "  {:<16} P {:.4}  R {:.4}  F1 {:.4}  n={}\n",
                m.name, m.precision, m.recall, m.f1, m.support
            ));
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Json => report.to_json(),
    };
    fs::write(path, text).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}
