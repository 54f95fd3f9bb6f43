//! Accuracy, macro F1 (UF1) and unweighted average recall from a confusion
//! matrix, plus pooled aggregation of leave-one-subject-out folds.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::LabelSpace;
use crate::error::{Error, Result};

/// `m[t][p]` counts samples of true class `t` predicted as `p`.
pub type Confusion = Vec<Vec<u64>>;

pub fn confusion(predicted: &[usize], truth: &[usize], n_classes: usize) -> Result<Confusion> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", predicted.len(), truth.len())));
    }
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::Range(format!("label {} out of range for {n_classes} classes", p.max(t))));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

fn total(m: &Confusion) -> u64 {
    m.iter().flatten().sum()
}

fn nonempty(m: &Confusion) -> Result<()> {
    if total(m) == 0 {
        Err(Error::EmptyEvaluation)
    } else {
        Ok(())
    }
}

/// Percentage of correct predictions.
pub fn accuracy(m: &Confusion) -> Result<f64> {
    nonempty(m)?;
    let correct: u64 = (0..m.len()).map(|i| m[i][i]).sum();
    Ok(100.0 * correct as f64 / total(m) as f64)
}

/// Precision, recall, F1 and support for one class. Zero denominators give
/// zero; `defined` is false when precision plus recall is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub defined: bool,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn class_stats(m: &Confusion, c: usize) -> (f64, f64, f64, u64, bool) {
    let tp = m[c][c];
    let support: u64 = m[c].iter().sum();
    let predicted: u64 = m.iter().map(|row| row[c]).sum();
    let p = ratio(tp, predicted);
    let r = ratio(tp, support);
    let defined = p + r > 0.0;
    let f1 = if defined { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1, support, defined)
}

/// Unweighted mean of per-class F1 over all `C` classes; classes with
/// `p + r = 0` contribute zero.
pub fn f1_macro(m: &Confusion) -> Result<f64> {
    nonempty(m)?;
    let n = m.len();
    Ok((0..n).map(|c| class_stats(m, c).2).sum::<f64>() / n as f64)
}

/// Mean recall over the classes that occur in the ground truth.
pub fn uar(m: &Confusion) -> Result<f64> {
    nonempty(m)?;
    let present: Vec<usize> = (0..m.len()).filter(|&c| m[c].iter().sum::<u64>() > 0).collect();
    Ok(present.iter().map(|&c| class_stats(m, c).1).sum::<f64>() / present.len() as f64)
}

/// Predictions of one leave-one-subject-out fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold_id: String,
    pub test_subject: String,
    pub sample_ids: Vec<String>,
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
}

impl FoldRecord {
    pub fn correct(&self) -> usize {
        self.predicted.iter().zip(&self.truth).filter(|(p, t)| p == t).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold_id: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percent.
    pub accuracy: f64,
    pub f1_macro: f64,
    /// Same value as `f1_macro`.
    pub uf1: f64,
    pub uar: f64,
    pub n_samples: u64,
    pub per_class: Vec<ClassMetrics>,
    /// Labels whose F1 is undefined and was scored zero.
    pub undefined_f1: Vec<String>,
    pub confusion: Confusion,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub folds: Vec<FoldSummary>,
}

impl MetricsReport {
    pub fn from_confusion(m: &Confusion, labels: &LabelSpace) -> Result<Self> {
        if m.len() != labels.len() {
            return Err(Error::Shape(format!("{} classes in matrix, {} labels", m.len(), labels.len())));
        }
        let accuracy = accuracy(m)?;
        let f1 = f1_macro(m)?;
        let uar = uar(m)?;
        let per_class: Vec<ClassMetrics> = (0..m.len())
            .map(|c| {
                let (precision, recall, f1, support, defined) = class_stats(m, c);
                ClassMetrics { label: labels.names()[c].clone(), precision, recall, f1, support, defined }
            })
            .collect();
        let undefined_f1 = per_class.iter().filter(|c| !c.defined).map(|c| c.label.clone()).collect();
        Ok(MetricsReport {
            accuracy,
            f1_macro: f1,
            uf1: f1,
            uar,
            n_samples: total(m),
            per_class,
            undefined_f1,
            confusion: m.clone(),
            folds: Vec::new(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples   {}", self.n_samples);
        let _ = writeln!(s, "accuracy  {:.2}%", self.accuracy);
        let _ = writeln!(s, "uf1       {:.4}", self.uf1);
        let _ = writeln!(s, "uar       {:.4}", self.uar);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<16} {:>9} {:>9} {:>9} {:>8}", "class", "precision", "recall", "f1", "support");
        for c in &self.per_class {
            let flag = if c.defined { "" } else { " *" };
            let _ = writeln!(
                s,
                "{:<16} {:>9.4} {:>9.4} {:>9.4} {:>8}{flag}",
                c.label, c.precision, c.recall, c.f1, c.support
            );
        }
        if !self.undefined_f1.is_empty() {
            let _ = writeln!(s, "* F1 undefined (no predictions and no samples), scored 0");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "confusion (rows = truth)");
        for (row, c) in self.confusion.iter().zip(&self.per_class) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>5}")).collect();
            let _ = writeln!(s, "{:<16}{}", c.label, cells.join(""));
        }
        s
    }
}

/// Pools every fold's predictions into one confusion matrix. Per-fold
/// accuracies are kept for diagnostics.
pub fn aggregate_loso(records: &[FoldRecord], labels: &LabelSpace) -> Result<MetricsReport> {
    let mut seen = BTreeSet::new();
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    let mut folds = Vec::new();
    for r in records {
        if r.sample_ids.len() != r.predicted.len() || r.truth.len() != r.predicted.len() {
            return Err(Error::Shape(format!("fold {} has mismatched record lengths", r.fold_id)));
        }
        for id in &r.sample_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Invalid(format!("sample {id} appears in more than one fold")));
            }
        }
        pred.extend_from_slice(&r.predicted);
        truth.extend_from_slice(&r.truth);
        let correct = r.correct();
        folds.push(FoldSummary {
            fold_id: r.fold_id.clone(),
            correct,
            total: r.truth.len(),
            accuracy: 100.0 * ratio(correct as u64, r.truth.len() as u64),
        });
    }
    folds.sort_by(|a, b| a.fold_id.cmp(&b.fold_id));
    let m = confusion(&pred, &truth, labels.len())?;
    let mut report = MetricsReport::from_confusion(&m, labels)?;
    report.folds = folds;
    Ok(report)
}

/// Fails unless the records cover exactly `expected`.
pub fn check_coverage<'a>(records: &[FoldRecord], expected: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let want: BTreeSet<&str> = expected.into_iter().collect();
    let got: BTreeSet<&str> = records.iter().flat_map(|r| r.sample_ids.iter().map(String::as_str)).collect();
    let missing: Vec<&str> = want.difference(&got).copied().collect();
    let extra: Vec<&str> = got.difference(&want).copied().collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Invalid(format!("fold records missing {missing:?}, unexpected {extra:?}")));
    }
    Ok(())
}
