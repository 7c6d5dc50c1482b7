//! Classification metrics: confusion matrix accumulation, per-class
//! precision/recall/F1, overall accuracy, and the unweighted class-average
//! F1, plus a fixed-format text report.

use crate::error::{Error, Result};

/// The nine ISPRS Vaihingen benchmark classes, in label order.
pub const ISPRS_CLASS_NAMES: [&str; 9] = [
    "power",
    "low_veg",
    "imp_surf",
    "car",
    "fence_hedge",
    "roof",
    "facade",
    "shrub",
    "tree",
];

/// Harmonic mean of precision and recall; zero when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Per-class summary. `flagged` marks degenerate denominators: the class was
/// never predicted (precision forced to 0) or never occurs in the truth
/// (recall forced to 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub flagged: bool,
}

/// Square count matrix with truth on rows and predictions on columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    num_classes: usize,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("confusion matrix needs at least one class".into()));
        }
        Ok(ConfusionMatrix {
            counts: vec![0; num_classes * num_classes],
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Count of points with the given true and predicted class.
    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    /// Total number of recorded points.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Records one point.
    pub fn record(&mut self, truth: u32, predicted: u32) -> Result<()> {
        let c = self.num_classes;
        if truth as usize >= c || predicted as usize >= c {
            return Err(Error::Contract(format!(
                "label pair ({truth}, {predicted}) outside {c} classes"
            )));
        }
        self.counts[truth as usize * c + predicted as usize] += 1;
        Ok(())
    }

    /// Records matched truth/prediction slices; errors carry the position of
    /// the offending pair.
    pub fn accumulate(&mut self, truth: &[u32], predicted: &[u32]) -> Result<()> {
        if truth.len() != predicted.len() {
            return Err(Error::Contract(format!(
                "{} truth labels against {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        for (index, (&t, &p)) in truth.iter().zip(predicted).enumerate() {
            self.record(t, p).map_err(|e| Error::Data {
                index,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Adds another matrix's counts into this one.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Contract(format!(
                "cannot merge a {}-class matrix into a {}-class matrix",
                other.num_classes, self.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Fraction of points on the diagonal; zero for an empty matrix.
    pub fn overall_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: u64 = (0..self.num_classes).map(|c| self.count(c, c)).sum();
        trace as f64 / total as f64
    }

    /// Precision, recall, and F1 for one class. A zero column (never
    /// predicted) or zero row (never true) forces the affected rate to 0 and
    /// flags the result.
    pub fn class_metrics(&self, class: usize) -> ClassMetrics {
        let tp = self.count(class, class);
        let predicted: u64 = (0..self.num_classes).map(|t| self.count(t, class)).sum();
        let actual: u64 = (0..self.num_classes).map(|p| self.count(class, p)).sum();
        let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let recall = if actual == 0 { 0.0 } else { tp as f64 / actual as f64 };
        ClassMetrics {
            precision,
            recall,
            f1: f1_score(precision, recall),
            flagged: predicted == 0 || actual == 0,
        }
    }

    pub fn all_class_metrics(&self) -> Vec<ClassMetrics> {
        (0..self.num_classes).map(|c| self.class_metrics(c)).collect()
    }

    /// Unweighted mean of the per-class F1 scores, degenerate classes
    /// included as zeros.
    pub fn average_f1(&self) -> f64 {
        let sum: f64 = self.all_class_metrics().iter().map(|m| m.f1).sum();
        sum / self.num_classes as f64
    }
}

/// Fixed-format report: one `class=<name> precision=<r> recall=<r> f1=<r>`
/// line per class followed by `oa=<r> avg_f1=<r>`, all rates with four
/// decimal places. Flagged classes gain a trailing ` flag=degenerate`.
pub fn format_report(matrix: &ConfusionMatrix, class_names: &[&str]) -> Result<String> {
    if class_names.len() != matrix.num_classes() {
        return Err(Error::Contract(format!(
            "{} class names for a {}-class matrix",
            class_names.len(),
            matrix.num_classes()
        )));
    }
    let mut out = String::new();
    for (name, m) in class_names.iter().zip(matrix.all_class_metrics()) {
        out.push_str(&format!(
            "class={name} precision={:.4} recall={:.4} f1={:.4}",
            m.precision, m.recall, m.f1
        ));
        if m.flagged {
            out.push_str(" flag=degenerate");
        }
        out.push('\n');
    }
    out.push_str(&format!(
        "oa={:.4} avg_f1={:.4}\n",
        matrix.overall_accuracy(),
        matrix.average_f1()
    ));
    Ok(out)
}

// ── Tests ───────────────────────────────────────────────────────────────────
