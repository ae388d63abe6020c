//! The pluggable classifier contract.
//!
//! A [`BackendFactory`] produces fresh trainable [`Backend`]s and restores
//! trained [`Classifier`]s from [`Checkpoint`]s. Two backends ship: the
//! deterministic hashed bag-of-words [`reference`] model and the
//! [`transformer`] adapter, which drives an external runtime process.

mod checkpoint;
pub mod reference;
pub mod transformer;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{report_one_vs_rest, MetricsReport};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use reference::{ReferenceBackend, ReferenceFactory, ReferenceModel};
pub use transformer::{TransformerAdapter, TransformerFactory, TRANSFORMER_RUNTIME_ENV};

/// Training hyperparameters shared by every backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub max_seq_len: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub seed: u64,
    pub class_weighting: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            max_seq_len: 512,
            batch_size: 32,
            learning_rate: 2e-5,
            epochs: 3,
            warmup_steps: 500,
            seed: 42,
            class_weighting: false,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("max_seq_len", self.max_seq_len),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("warmup_steps", self.warmup_steps),
        ] {
            if value == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Per-label loss multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub BTreeMap<String, f64>);

impl ClassWeights {
    pub fn get(&self, label: &str) -> f64 {
        self.0.get(label).copied().unwrap_or(1.0)
    }
}

/// `weight_c = N / (K * n_c)`: inverse frequency, normalized so balanced
/// data gets weight 1 for every class.
pub fn compute_class_weights(class_counts: &BTreeMap<String, usize>) -> Result<ClassWeights> {
    if class_counts.len() < 2 {
        return Err(Error::DegenerateCounts(format!(
            "need at least 2 classes, got {}",
            class_counts.len()
        )));
    }
    if let Some((label, _)) = class_counts.iter().find(|(_, &n)| n == 0) {
        return Err(Error::DegenerateCounts(format!("class {label:?} has zero records")));
    }
    let total: usize = class_counts.values().sum();
    let k = class_counts.len();
    Ok(ClassWeights(
        class_counts
            .iter()
            .map(|(label, &n)| (label.clone(), total as f64 / (k as f64 * n as f64)))
            .collect(),
    ))
}

/// Class probabilities for one text, aligned with the model's label order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityVector(pub Vec<f64>);

impl ProbabilityVector {
    /// Index of the largest probability; ties go to the earliest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// A trained, immutable text classifier.
pub trait Classifier: Send + Sync {
    fn backend_kind(&self) -> &str;

    fn label_order(&self) -> &[String];

    /// Label whose probability is reported as "the" score in binary use.
    fn positive_label(&self) -> &str;

    fn predict_proba(&self, texts: &[String]) -> Result<Vec<ProbabilityVector>>;

    fn to_checkpoint(&self) -> Result<Checkpoint>;

    fn positive_index(&self) -> usize {
        self.label_order()
            .iter()
            .position(|l| l == self.positive_label())
            .unwrap_or(0)
    }
}

pub struct TrainInput<'a> {
    pub train: &'a LabeledDataset,
    pub validation: &'a LabeledDataset,
    pub config: &'a BackendConfig,
    pub positive_label: &'a str,
    pub class_weights: Option<&'a ClassWeights>,
}

/// What a backend reports after each epoch.
pub struct EpochReport<'a> {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub validation: MetricsReport,
    pub model: &'a dyn Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochControl {
    Continue,
    Stop,
}

pub type EpochCallback<'a> = dyn FnMut(&EpochReport<'_>) -> Result<EpochControl> + 'a;

/// A trainable model instance. Training takes exclusive access.
pub trait Backend: Send {
    fn kind(&self) -> &str;

    /// Trains for at most `config.epochs` epochs, calling `on_epoch` after
    /// each; stops early when the callback says so.
    fn train(
        &mut self,
        input: TrainInput<'_>,
        on_epoch: &mut EpochCallback<'_>,
    ) -> Result<Box<dyn Classifier>>;
}

pub trait BackendFactory: Send + Sync {
    fn kind(&self) -> &str;

    fn create(&self) -> Result<Box<dyn Backend>>;

    fn restore(&self, checkpoint: Checkpoint) -> Result<Box<dyn Classifier>>;
}

/// Picks the label treated as positive in a label set. Recognizes the usual
/// negative tokens (`0`, `non_td`, `neg`, `other`, ...) and positive tokens
/// (`1`, `td`, `pos`, ...); otherwise takes the last label in sorted order.
pub fn default_positive_label(labels: &[String]) -> Option<String> {
    const NEGATIVE: &[&str] = &[
        "0", "false", "no", "non_td", "non-td", "nontd", "not_td", "neg", "negative", "other",
        "none", "rest", "no_td",
    ];
    const POSITIVE: &[&str] = &["1", "true", "yes", "td", "pos", "positive", "debt"];
    let is = |set: &[&str], l: &str| set.contains(&l.to_ascii_lowercase().as_str());
    if labels.len() == 2 {
        match (is(NEGATIVE, &labels[0]), is(NEGATIVE, &labels[1])) {
            (true, false) => return Some(labels[1].clone()),
            (false, true) => return Some(labels[0].clone()),
            _ => {}
        }
    }
    if let Some(l) = labels.iter().find(|l| is(POSITIVE, l)) {
        return Some(l.clone());
    }
    let mut sorted = labels.to_vec();
    sorted.sort();
    sorted.pop()
}

/// Argmax label and its probability for each text.
pub fn single_model_predict(model: &dyn Classifier, texts: &[String]) -> Result<Vec<(String, f64)>> {
    let probs = model.predict_proba(texts)?;
    Ok(probs
        .iter()
        .map(|p| {
            let i = p.argmax();
            (model.label_order()[i].clone(), p.0[i])
        })
        .collect())
}

/// Validation metrics and mean cross-entropy of `model` on `dataset`.
pub fn evaluate(
    model: &dyn Classifier,
    dataset: &LabeledDataset,
    positive_label: &str,
) -> Result<(MetricsReport, f64)> {
    let probs = model.predict_proba(&dataset.texts())?;
    score_probabilities(&probs, model.label_order(), dataset, positive_label)
}

/// One-vs-rest metrics and mean cross-entropy of precomputed probabilities
/// against `dataset` labels.
pub(crate) fn score_probabilities(
    probs: &[ProbabilityVector],
    labels: &[String],
    dataset: &LabeledDataset,
    positive_label: &str,
) -> Result<(MetricsReport, f64)> {
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(probs.len());
    for (p, record) in probs.iter().zip(dataset.records()) {
        predictions.push(labels[p.argmax()].clone());
        let truth = labels.iter().position(|l| *l == record.label).map_or(0.0, |i| p.0[i]);
        loss -= truth.max(f64::MIN_POSITIVE).ln();
    }
    let report = report_one_vs_rest(&predictions, &dataset.labels(), positive_label)?;
    Ok((report, loss / dataset.len().max(1) as f64))
}

/// Loads any checkpoint written by a shipped backend.
pub fn load_classifier(path: impl AsRef<Path>) -> Result<Box<dyn Classifier>> {
    let checkpoint = load_checkpoint(path)?;
    restore_classifier(checkpoint)
}

pub fn restore_classifier(checkpoint: Checkpoint) -> Result<Box<dyn Classifier>> {
    match checkpoint.backend_kind.as_str() {
        reference::KIND => Ok(Box::new(ReferenceModel::from_checkpoint(checkpoint)?)),
        transformer::KIND => TransformerFactory::from_env()?.restore(checkpoint),
        other => Err(Error::IncompatibleCheckpoint(format!(
            "unknown backend kind {other:?}"
        ))),
    }
}

/// Factory for a backend name as used on the command line and in the API.
pub fn factory_for(kind: &str) -> Result<Box<dyn BackendFactory>> {
    match kind {
        reference::KIND => Ok(Box::new(ReferenceFactory::new())),
        transformer::KIND => Ok(Box::new(TransformerFactory::from_env()?)),
        other => Err(Error::UnknownModel(format!("unknown backend {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
        pairs.iter().map(|(l, n)| (l.to_string(), *n)).collect()
    }

    #[test]
    fn class_weight_examples() {
        let w = compute_class_weights(&counts(&[("pos", 50), ("neg", 50)])).unwrap();
        assert_eq!(w.get("pos"), 1.0);
        assert_eq!(w.get("neg"), 1.0);

        let w = compute_class_weights(&counts(&[("pos", 10), ("neg", 90)])).unwrap();
        assert_eq!(w.get("pos"), 5.0);
        assert_eq!(format!("{:.4}", w.get("neg")), "0.5556");

        let w = compute_class_weights(&counts(&[("a", 1), ("b", 1), ("c", 2)])).unwrap();
        assert_eq!(format!("{:.4}", w.get("a")), "1.3333");
        assert_eq!(format!("{:.4}", w.get("b")), "1.3333");
        assert_eq!(format!("{:.4}", w.get("c")), "0.6667");
    }

    #[test]
    fn class_weight_errors() {
        assert!(matches!(
            compute_class_weights(&counts(&[("a", 0), ("b", 3)])),
            Err(Error::DegenerateCounts(_))
        ));
        assert!(matches!(
            compute_class_weights(&counts(&[("a", 3)])),
            Err(Error::DegenerateCounts(_))
        ));
    }

    #[test]
    fn argmax_tie_prefers_first() {
        assert_eq!(ProbabilityVector(vec![0.5, 0.5]).argmax(), 0);
        assert_eq!(ProbabilityVector(vec![0.3, 0.7]).argmax(), 1);
    }

    #[test]
    fn positive_label_heuristic() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(default_positive_label(&s(&["0", "1"])).unwrap(), "1");
        assert_eq!(default_positive_label(&s(&["non_td", "td"])).unwrap(), "td");
        assert_eq!(default_positive_label(&s(&["code", "other"])).unwrap(), "code");
        assert_eq!(default_positive_label(&s(&["a", "b"])).unwrap(), "b");
        assert!(default_positive_label(&[]).is_none());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = BackendConfig::default();
        assert_eq!(
            (c.max_seq_len, c.batch_size, c.learning_rate, c.epochs, c.warmup_steps),
            (512, 32, 2e-5, 3, 500)
        );
        assert!(c.validate().is_ok());
        let bad = BackendConfig { batch_size: 0, ..c.clone() };
        assert!(bad.validate().is_err());
        let bad = BackendConfig { learning_rate: 0.0, ..c };
        assert!(bad.validate().is_err());
    }
}
