//! Confusion matrices, per-class precision/recall/F1 and the table, heat-map
//! and learning-curve artifacts built from them.
//!
//! Every ratio with a zero denominator is defined as 0.

use crate::error::{Error, Result};
use std::fmt::Write as _;

/// `counts[gold][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
    labels: Vec<String>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>, labels: Vec<String>) -> Result<Self> {
        let n = labels.len();
        if counts.len() != n || counts.iter().any(|r| r.len() != n) {
            return Err(Error::Metrics(format!("confusion matrix must be {n}x{n}")));
        }
        Ok(Self { counts, labels })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.counts.len() {
            return Err(Error::Metrics(format!(
                "{} labels for a {}-class matrix",
                labels.len(),
                self.counts.len()
            )));
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    /// Row sum: gold instances of class `c`.
    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    /// Column sum: predictions of class `c`.
    pub fn predicted(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        ratio((0..self.num_classes()).map(|c| self.true_positives(c)).sum(), self.total())
    }

    /// Micro-averaged F1 over all classes.
    pub fn micro_f1(&self) -> f64 {
        let tp: u64 = (0..self.num_classes()).map(|c| self.true_positives(c)).sum();
        let fp: u64 = (0..self.num_classes()).map(|c| self.predicted(c) - self.true_positives(c)).sum();
        let fneg: u64 = (0..self.num_classes()).map(|c| self.support(c) - self.true_positives(c)).sum();
        let p = ratio(tp, tp + fp);
        let r = ratio(tp, tp + fneg);
        harmonic(p, r)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn confusion_matrix(gold: &[usize], predicted: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if gold.len() != predicted.len() {
        return Err(Error::Metrics(format!(
            "gold has {} labels but predictions have {}",
            gold.len(),
            predicted.len()
        )));
    }
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for (&g, &p) in gold.iter().zip(predicted) {
        if g >= num_classes || p >= num_classes {
            return Err(Error::Metrics(format!(
                "label index {} outside {num_classes} classes",
                g.max(p)
            )));
        }
        counts[g][p] += 1;
    }
    let labels = (0..num_classes).map(|c| c.to_string()).collect();
    Ok(ConfusionMatrix { counts, labels })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunMetadata {
    pub model: String,
    pub strategy: String,
    pub n_train: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub labels: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub metadata: RunMetadata,
}

pub fn compute_report(matrix: &ConfusionMatrix, metadata: RunMetadata) -> Result<EvalReport> {
    let total = matrix.total();
    if total == 0 {
        return Err(Error::Metrics("cannot report on an empty confusion matrix".to_string()));
    }
    let per_class: Vec<ClassMetrics> = (0..matrix.num_classes())
        .map(|c| {
            let tp = matrix.true_positives(c);
            let precision = ratio(tp, matrix.predicted(c));
            let recall = ratio(tp, matrix.support(c));
            ClassMetrics {
                precision,
                recall,
                f1: harmonic(precision, recall),
                support: matrix.support(c),
            }
        })
        .collect();
    let n = total as f64;
    let weighted = |f: fn(&ClassMetrics) -> f64| -> f64 {
        per_class.iter().map(|m| m.support as f64 / n * f(m)).sum()
    };
    Ok(EvalReport {
        labels: matrix.labels().to_vec(),
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / per_class.len() as f64,
        weighted_precision: weighted(|m| m.precision),
        weighted_recall: weighted(|m| m.recall),
        weighted_f1: weighted(|m| m.f1),
        accuracy: matrix.accuracy(),
        per_class,
        metadata,
    })
}

impl EvalReport {
    fn values(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.per_class.len() + 4);
        for m in &self.per_class {
            v.extend([m.precision, m.recall, m.f1]);
        }
        v.extend([self.weighted_precision, self.weighted_recall, self.weighted_f1, self.macro_f1]);
        v
    }

    fn row_name(&self) -> String {
        match (self.metadata.model.is_empty(), self.metadata.strategy.is_empty()) {
            (false, false) => format!("{} ({})", self.metadata.model, self.metadata.strategy),
            (false, true) => self.metadata.model.clone(),
            (true, false) => self.metadata.strategy.clone(),
            (true, true) => "model".to_string(),
        }
    }
}

/// Rendered report tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tables {
    /// Two-decimal markdown table.
    pub markdown: String,
    /// Full-precision CSV.
    pub csv: String,
}

/// One row per report: P/R/F1 per class, weighted P/R/F1, macro F1.
pub fn render_tables(reports: &[EvalReport]) -> Result<Tables> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Metrics("no reports to render".to_string()))?;
    if let Some(bad) = reports.iter().find(|r| r.labels != first.labels) {
        return Err(Error::Metrics(format!(
            "label schema mismatch: {:?} vs {:?}",
            first.labels, bad.labels
        )));
    }
    let mut md = String::from("| Model |");
    let mut sep = String::from("|---|");
    let mut csv = String::from("model,strategy,n_train,seed");
    for l in &first.labels {
        for m in ["P", "R", "F1"] {
            let _ = write!(md, " {l} {m} |");
            sep.push_str("---|");
        }
        let _ = write!(csv, ",{l}_precision,{l}_recall,{l}_f1");
    }
    md.push_str(" Weighted P | Weighted R | Weighted F1 | Macro F1 |\n");
    sep.push_str("---|---|---|---|\n");
    md.push_str(&sep);
    csv.push_str(",weighted_precision,weighted_recall,weighted_f1,macro_f1\n");
    for r in reports {
        let _ = write!(md, "| {} |", r.row_name());
        let m = &r.metadata;
        let _ = write!(csv, "{},{},{},{}", m.model, m.strategy, m.n_train, m.seed);
        for v in r.values() {
            let _ = write!(md, " {v:.2} |");
            let _ = write!(csv, ",{v}");
        }
        md.push('\n');
        csv.push('\n');
    }
    Ok(Tables { markdown: md, csv })
}

/// Row-normalized proportions, one row per gold class.
pub fn render_heatmap_data(matrix: &ConfusionMatrix) -> String {
    let mut out = String::from("gold");
    for l in matrix.labels() {
        let _ = write!(out, ",{l}");
    }
    out.push('\n');
    for (c, row) in matrix.counts().iter().enumerate() {
        let total: u64 = row.iter().sum();
        out.push_str(&matrix.labels()[c]);
        for &v in row {
            let _ = write!(out, ",{}", ratio(v, total));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub n_train: usize,
    pub seed: u64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveSeries {
    pub strategy: String,
    pub points: Vec<CurvePoint>,
}

/// Long-format `strategy,n_train,seed,macro_f1`.
pub fn render_learning_curve(series: &[CurveSeries]) -> Result<String> {
    let mut out = String::from("strategy,n_train,seed,macro_f1\n");
    for s in series {
        if s.points.windows(2).any(|w| w[0].n_train > w[1].n_train) {
            return Err(Error::Metrics(format!(
                "series {} is not sorted by n_train",
                s.strategy
            )));
        }
        for p in &s.points {
            let _ = writeln!(out, "{},{},{},{}", s.strategy, p.n_train, p.seed, p.macro_f1);
        }
    }
    Ok(out)
}
