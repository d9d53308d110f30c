//! Classification and regression evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Task;
use crate::tensor::Matrix;

pub const CLASSIFICATION_METRICS: [(&str, &str); 4] = [
    ("accuracy", "Accuracy"),
    ("precision", "Precision"),
    ("recall", "Recall"),
    ("f1", "F1-Score"),
];

pub const REGRESSION_METRICS: [(&str, &str); 3] = [("mae", "MAE"), ("rmse", "RMSE"), ("r2", "R²")];

/// `counts[i][j]` = samples of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|i| self.get(i, i)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.n_classes.max(1)).map(<[u64]>::to_vec).collect()
    }
}

pub fn confusion(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::shape(
            "confusion",
            format!("{} true labels vs {} predictions", truth.len(), pred.len()),
        ));
    }
    let mut counts = vec![0u64; n_classes * n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::domain(
                "confusion",
                format!("label pair ({t}, {p}) out of range for {n_classes} classes"),
            ));
        }
        counts[t * n_classes + p] += 1;
    }
    Ok(ConfusionMatrix { n_classes, counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub metrics: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// `(key, label)` pairs in display order for this task.
    pub fn layout(&self) -> &'static [(&'static str, &'static str)] {
        match self.task {
            Task::Classification => &CLASSIFICATION_METRICS,
            Task::Regression => &REGRESSION_METRICS,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Accuracy plus macro-averaged precision and recall; F1 is the harmonic
/// mean of the two macro averages. An undefined per-class ratio counts as 0.
pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::domain("classification_metrics", "confusion matrix is empty"));
    }
    let k = cm.n_classes;
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut precision = 0.0;
    let mut recall = 0.0;
    for c in 0..k {
        let tp = cm.get(c, c);
        let predicted: u64 = (0..k).map(|t| cm.get(t, c)).sum();
        let actual: u64 = (0..k).map(|p| cm.get(c, p)).sum();
        precision += ratio(tp, predicted);
        recall += ratio(tp, actual);
    }
    precision /= k as f64;
    recall /= k as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let metrics = BTreeMap::from([
        ("accuracy".to_owned(), cm.trace() as f64 / total as f64),
        ("precision".to_owned(), precision),
        ("recall".to_owned(), recall),
        ("f1".to_owned(), f1),
    ]);
    Ok(MetricsReport {
        task: Task::Classification,
        metrics,
    })
}

/// MAE, RMSE and R² over all entries. R² is omitted when the target is constant.
pub fn regression_metrics(pred: &Matrix, target: &Matrix) -> Result<MetricsReport> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "regression_metrics",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    if target.rows() < 2 {
        return Err(Error::domain("regression_metrics", "R² needs at least 2 rows"));
    }
    let n = pred.len() as f64;
    let mut abs = 0.0;
    let mut sse = 0.0;
    for (p, t) in pred.as_slice().iter().zip(target.as_slice()) {
        abs += (p - t).abs();
        sse += (p - t) * (p - t);
    }
    let mean = target.column_sums().scale(1.0 / target.rows() as f64);
    let sst: f64 = target
        .iter_rows()
        .map(|r| {
            r.iter()
                .zip(mean.as_slice())
                .map(|(t, m)| (t - m) * (t - m))
                .sum::<f64>()
        })
        .sum();
    let mut metrics = BTreeMap::from([("mae".to_owned(), abs / n), ("rmse".to_owned(), (sse / n).sqrt())]);
    if sst > 0.0 {
        metrics.insert("r2".to_owned(), 1.0 - sse / sst);
    }
    Ok(MetricsReport {
        task: Task::Regression,
        metrics,
    })
}

/// Renders reports side by side: one row per metric, one column per model.
pub fn render_table(columns: &[(&str, &MetricsReport)]) -> String {
    let layout = columns.first().map_or(&CLASSIFICATION_METRICS[..], |(_, r)| r.layout());
    let mut cells: Vec<Vec<String>> = vec![std::iter::once("Metric".to_owned())
        .chain(columns.iter().map(|(name, _)| (*name).to_owned()))
        .collect()];
    for (key, label) in layout {
        let mut row = vec![(*label).to_owned()];
        for (_, report) in columns {
            row.push(report.get(key).map_or_else(|| "n/a".to_owned(), |v| format!("{v:.4}")));
        }
        cells.push(row);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let rule: String = widths
        .iter()
        .map(|w| format!("+{}", "-".repeat(w + 2)))
        .collect::<String>()
        + "+\n";
    let mut out = rule.clone();
    for (i, row) in cells.iter().enumerate() {
        for (cell, w) in row.iter().zip(&widths) {
            let pad = w - cell.chars().count();
            out.push_str(&format!("| {cell}{} ", " ".repeat(pad)));
        }
        out.push_str("|\n");
        if i == 0 {
            out.push_str(&rule);
        }
    }
    out.push_str(&rule);
    out
}
