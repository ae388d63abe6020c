//! Binary confusion matrices and the derived metric suite.
//!
//! Every ratio with a zero denominator evaluates to 0, including MCC when
//! any of its four marginal factors is empty.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Counts predictions against truths with `positive` as the positive class.
pub fn confusion(
    predictions: &[impl AsRef<str>],
    truths: &[impl AsRef<str>],
    positive: &str,
) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() || truths.is_empty() {
        return Err(Error::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    let negatives: BTreeSet<&str> = predictions
        .iter()
        .map(AsRef::as_ref)
        .chain(truths.iter().map(AsRef::as_ref))
        .filter(|l| *l != positive)
        .collect();
    if negatives.len() > 1 {
        let mut labels: Vec<String> = negatives.into_iter().map(str::to_string).collect();
        labels.push(positive.to_string());
        return Err(Error::MoreThanTwoLabels(labels));
    }
    let mut cm = ConfusionMatrix::default();
    for (p, t) in predictions.iter().zip(truths) {
        match (p.as_ref() == positive, t.as_ref() == positive) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

/// Matthews correlation coefficient.
///
/// The numerator is exact in `i128`; the denominator is formed as
/// `sqrt((TP+FP)(TP+FN)) * sqrt((TN+FP)(TN+FN))` so no intermediate
/// product leaves `u128` before the square root.
pub fn mcc(cm: &ConfusionMatrix) -> f64 {
    let ConfusionMatrix { tp, fp, fn_, tn } = *cm;
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.contains(&0) {
        return 0.0;
    }
    let numerator = tp as i128 * tn as i128 - fp as i128 * fn_ as i128;
    let left = (factors[0] as u128 * factors[1] as u128) as f64;
    let right = (factors[2] as u128 * factors[3] as u128) as f64;
    let value = numerator as f64 / (left.sqrt() * right.sqrt());
    value.clamp(-1.0, 1.0)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

pub fn prf(cm: &ConfusionMatrix) -> Prf {
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    Prf {
        precision,
        recall,
        f1: f1_score(precision, recall),
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    pub support: u64,
    pub positive_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionMatrix>,
}

impl MetricsReport {
    pub fn from_confusion(cm: ConfusionMatrix, positive_label: impl Into<String>) -> Self {
        let p = prf(&cm);
        Self {
            accuracy: p.accuracy,
            precision: p.precision,
            recall: p.recall,
            f1: p.f1,
            mcc: mcc(&cm),
            support: cm.total(),
            positive_label: positive_label.into(),
            confusion: Some(cm),
        }
    }

    /// Value of a metric by its table name.
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Accuracy => self.accuracy,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
            Metric::F1 => self.f1,
            Metric::Mcc => self.mcc,
        }
    }

    /// Flat key/value view for JSON consumers.
    pub fn to_flat(&self) -> serde_json::Map<String, serde_json::Value> {
        let mut map = serde_json::Map::new();
        for metric in Metric::ALL {
            map.insert(metric.key().into(), self.get(metric).into());
        }
        map.insert("support".into(), self.support.into());
        map.insert("positive_label".into(), self.positive_label.clone().into());
        map
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Precision,
    Recall,
    F1,
    Mcc,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Accuracy,
        Metric::Precision,
        Metric::Recall,
        Metric::F1,
        Metric::Mcc,
    ];

    pub fn title(self) -> &'static str {
        match self {
            Metric::Accuracy => "Accuracy",
            Metric::Precision => "Precision",
            Metric::Recall => "Recall",
            Metric::F1 => "F1 Score",
            Metric::Mcc => "MCC",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::F1 => "f1",
            Metric::Mcc => "mcc",
        }
    }
}

pub fn report(
    predictions: &[impl AsRef<str>],
    truths: &[impl AsRef<str>],
    positive: &str,
) -> Result<MetricsReport> {
    let cm = confusion(predictions, truths, positive)?;
    Ok(MetricsReport::from_confusion(cm, positive))
}

/// Like [`report`], but every label other than `positive` counts as the
/// negative class.
pub fn report_one_vs_rest(
    predictions: &[impl AsRef<str>],
    truths: &[impl AsRef<str>],
    positive: &str,
) -> Result<MetricsReport> {
    let binarize = |l: &str| if l == positive { positive } else { "" };
    let p: Vec<&str> = predictions.iter().map(|l| binarize(l.as_ref())).collect();
    let t: Vec<&str> = truths.iter().map(|l| binarize(l.as_ref())).collect();
    report(&p, &t, positive)
}

/// Renders metrics as rows and models as columns, values to 4 decimals.
/// Column order follows the input order.
pub fn comparison_table<S: AsRef<str>>(reports: &[(S, MetricsReport)]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::NoReports);
    }
    let label_width = Metric::ALL.iter().map(|m| m.title().len()).max().unwrap_or(0).max(6);
    let widths: Vec<usize> = reports
        .iter()
        .map(|(name, _)| name.as_ref().len().max(7))
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{:<label_width$}", "Metric");
    for ((name, _), w) in reports.iter().zip(&widths) {
        let _ = write!(out, "  {:>w$}", name.as_ref());
    }
    out.push('\n');
    for metric in Metric::ALL {
        let _ = write!(out, "{:<label_width$}", metric.title());
        for ((_, report), w) in reports.iter().zip(&widths) {
            let _ = write!(out, "  {:>w$.4}", report.get(metric));
        }
        out.push('\n');
    }
    Ok(out)
}
