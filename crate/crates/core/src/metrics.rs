//! Confusion matrix and per-class precision / recall / F1.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
    total: u64,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n: n_classes,
            counts: vec![0; n_classes * n_classes],
            total: 0,
        }
    }

    pub fn from_labels(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<Self> {
        let mut cm = Self::new(n_classes);
        cm.add_all(truth, pred)?;
        Ok(cm)
    }

    pub fn add_all(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Range(format!(
                "{} true labels but {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        if let Some(&bad) = truth.iter().chain(pred).find(|&&c| c >= self.n) {
            return Err(Error::Range(format!("label {bad} outside 0..{}", self.n)));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            self.counts[t * self.n + p] += 1;
        }
        self.total += truth.len() as u64;
        Ok(())
    }

    /// Adds another partial matrix of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Range(format!("cannot merge {}-class and {}-class matrices", other.n, self.n)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.n..(truth + 1) * self.n].iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.n).map(|t| self.get(t, pred)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|c| self.get(c, c)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.trace() as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when a zero denominator forced any of the three metrics to 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub classes: Vec<ClassMetrics>,
    /// Unweighted means over classes with non-zero support.
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub total: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn precision_recall_f1(cm: &ConfusionMatrix) -> ClassReport {
    let classes: Vec<ClassMetrics> = (0..cm.n)
        .map(|c| {
            let tp = cm.get(c, c);
            let support = cm.row_sum(c);
            let precision = ratio(tp, cm.col_sum(c));
            let recall = ratio(tp, support);
            let (p, r) = (precision.unwrap_or(0.0), recall.unwrap_or(0.0));
            let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            ClassMetrics {
                precision: p,
                recall: r,
                f1,
                support,
                degenerate: precision.is_none() || recall.is_none() || p + r == 0.0,
            }
        })
        .collect();
    let present: Vec<&ClassMetrics> = classes.iter().filter(|m| m.support > 0).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if present.is_empty() {
            0.0
        } else {
            present.iter().map(|m| f(m)).sum::<f64>() / present.len() as f64
        }
    };
    ClassReport {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        accuracy: cm.accuracy(),
        total: cm.total,
        classes,
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn report_csv(report: &ClassReport, class_names: &[String]) -> Result<String> {
    if class_names.len() != report.classes.len() {
        return Err(Error::Range(format!(
            "{} class names for {} classes",
            class_names.len(),
            report.classes.len()
        )));
    }
    let mut out = String::from("class,precision,recall,f1,support\n");
    for (name, m) in class_names.iter().zip(&report.classes) {
        writeln!(
            out,
            "{},{:.4},{:.4},{:.4},{}",
            csv_field(name),
            m.precision,
            m.recall,
            m.f1,
            m.support
        )
        .expect("writing to a String");
    }
    writeln!(
        out,
        "macro_avg,{:.4},{:.4},{:.4},{}",
        report.macro_precision, report.macro_recall, report.macro_f1, report.total
    )
    .expect("writing to a String");
    let a = report.accuracy;
    writeln!(out, "accuracy,{a:.4},{a:.4},{a:.4},{}", report.total).expect("writing to a String");
    Ok(out)
}

pub fn confusion_csv(cm: &ConfusionMatrix, class_names: &[String]) -> Result<String> {
    if class_names.len() != cm.n {
        return Err(Error::Range(format!("{} class names for {} classes", class_names.len(), cm.n)));
    }
    let mut out = String::from("true\\pred");
    for name in class_names {
        out.push(',');
        out.push_str(&csv_field(name));
    }
    out.push('\n');
    for (t, name) in class_names.iter().enumerate() {
        out.push_str(&csv_field(name));
        for p in 0..cm.n {
            write!(out, ",{}", cm.get(t, p)).expect("writing to a String");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Writes the per-class report and the confusion grid.
pub fn emit_report_csv(
    report: &ClassReport,
    cm: &ConfusionMatrix,
    class_names: &[String],
    report_path: &Path,
    confusion_path: &Path,
) -> Result<()> {
    let r = report_csv(report, class_names)?;
    let c = confusion_csv(cm, class_names)?;
    fs::write(report_path, r).map_err(|e| Error::io(report_path, e))?;
    fs::write(confusion_path, c).map_err(|e| Error::io(confusion_path, e))
}
