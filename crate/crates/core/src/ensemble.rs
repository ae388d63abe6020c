//! Two-stage inference: a gate model decides whether a text carries
//! technical debt, then binary type models score only the gate-positive
//! texts.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{load_classifier, Classifier};
use crate::dataset::{LabeledDataset, Table, DEFAULT_TEXT_COLUMN};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

/// Serialized as a flat object `{gate, gate_threshold, type_models,
/// type_threshold}`. Model references are resolved through a
/// [`ModelSource`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub gate: String,
    #[serde(default = "default_threshold")]
    pub gate_threshold: f64,
    #[serde(default)]
    pub type_models: BTreeMap<String, String>,
    #[serde(default = "default_threshold")]
    pub type_threshold: f64,
}

impl EnsembleSpec {
    pub fn new(gate: impl Into<String>) -> Self {
        Self {
            gate: gate.into(),
            gate_threshold: DEFAULT_THRESHOLD,
            type_models: BTreeMap::new(),
            type_threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn with_type(mut self, name: impl Into<String>, model: impl Into<String>) -> Self {
        self.type_models.insert(name.into(), model.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (what, t) in [("gate_threshold", self.gate_threshold), ("type_threshold", self.type_threshold)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::InvalidConfig(format!("{what} must lie in (0, 1), got {t}")));
            }
        }
        if self.gate.trim().is_empty() {
            return Err(Error::InvalidConfig("gate model reference is empty".into()));
        }
        if let Some((name, _)) = self.type_models.iter().find(|(n, m)| n.trim().is_empty() || m.trim().is_empty()) {
            return Err(Error::InvalidConfig(format!("empty type model entry {name:?}")));
        }
        Ok(())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let spec: Self = serde_json::from_slice(bytes)
            .map_err(|e| Error::InvalidConfig(format!("ensemble spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePrediction {
    pub is_td: bool,
    pub td_probability: f64,
    /// Gate label implied by the threshold decision.
    pub gate_label: String,
    /// Gate probability of `gate_label`.
    pub gate_probability: f64,
    pub type_probabilities: BTreeMap<String, f64>,
    pub assigned_types: Vec<String>,
    pub primary_type: Option<String>,
}

/// Resolves model references (registry names, checkpoint paths) to loaded
/// classifiers.
pub trait ModelSource {
    fn resolve(&self, reference: &str) -> Result<Arc<dyn Classifier>>;
}

/// Treats every reference as a checkpoint path.
pub struct CheckpointPaths;

impl ModelSource for CheckpointPaths {
    fn resolve(&self, reference: &str) -> Result<Arc<dyn Classifier>> {
        load_classifier(reference).map(Arc::from)
    }
}

/// A spec with all of its models loaded.
#[derive(Clone)]
pub struct LoadedEnsemble {
    spec: EnsembleSpec,
    gate: Arc<dyn Classifier>,
    types: Vec<(String, Arc<dyn Classifier>)>,
}

impl std::fmt::Debug for LoadedEnsemble {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LoadedEnsemble").field("spec", &self.spec).finish_non_exhaustive()
    }
}

fn by_probability_then_name(a: &(&String, &f64), b: &(&String, &f64)) -> Ordering {
    b.1.partial_cmp(a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(b.0))
}

impl LoadedEnsemble {
    pub fn load(spec: &EnsembleSpec, source: &dyn ModelSource) -> Result<Self> {
        spec.validate()?;
        let gate = source.resolve(&spec.gate)?;
        let types = spec
            .type_models
            .iter()
            .map(|(name, reference)| Ok((name.clone(), source.resolve(reference)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_models(spec.clone(), gate, types))
    }

    pub fn from_models(
        spec: EnsembleSpec,
        gate: Arc<dyn Classifier>,
        types: Vec<(String, Arc<dyn Classifier>)>,
    ) -> Self {
        Self { spec, gate, types }
    }

    pub fn spec(&self) -> &EnsembleSpec {
        &self.spec
    }

    pub fn type_names(&self) -> Vec<String> {
        self.types.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Positive-class probability of each type model for every text.
    fn type_scores(&self, texts: &[String]) -> Result<Vec<BTreeMap<String, f64>>> {
        let mut per_text = vec![BTreeMap::new(); texts.len()];
        if texts.is_empty() || self.types.is_empty() {
            return Ok(per_text);
        }
        let results: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = self
                .types
                .iter()
                .map(|(_, model)| {
                    scope.spawn(move || -> Result<Vec<f64>> {
                        let probs = model.predict_proba(texts)?;
                        let pos = model.positive_index();
                        Ok(probs.iter().map(|p| p.0[pos]).collect())
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Runtime("type model panicked".into()))))
                .collect()
        });
        for ((name, _), scores) in self.types.iter().zip(results) {
            for (slot, score) in per_text.iter_mut().zip(scores?) {
                slot.insert(name.clone(), score);
            }
        }
        Ok(per_text)
    }

    fn decide(&self, td_probability: f64, types: BTreeMap<String, f64>) -> EnsemblePrediction {
        let is_td = td_probability >= self.spec.gate_threshold;
        let labels = self.gate.label_order();
        let pos = self.gate.positive_index();
        let (gate_label, gate_probability) = if is_td || labels.len() < 2 {
            (labels[pos].clone(), td_probability)
        } else {
            let neg = if pos == 0 { 1 } else { 0 };
            (labels[neg].clone(), 1.0 - td_probability)
        };
        let mut ranked: Vec<(&String, &f64)> = types.iter().collect();
        ranked.sort_by(by_probability_then_name);
        let assigned_types = ranked
            .iter()
            .filter(|(_, p)| **p >= self.spec.type_threshold)
            .map(|(n, _)| (*n).clone())
            .collect();
        let primary_type = if is_td { ranked.first().map(|(n, _)| (*n).clone()) } else { None };
        EnsemblePrediction {
            is_td,
            td_probability,
            gate_label,
            gate_probability,
            assigned_types,
            primary_type,
            type_probabilities: types,
        }
    }

    /// Gate over all texts; type models over gate-positive texts only.
    pub fn predict(&self, texts: &[String]) -> Result<Vec<EnsemblePrediction>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let pos = self.gate.positive_index();
        let td: Vec<f64> = self.gate.predict_proba(texts)?.iter().map(|p| p.0[pos]).collect();
        let positive_idx: Vec<usize> = (0..texts.len())
            .filter(|&i| td[i] >= self.spec.gate_threshold)
            .collect();
        let positive_texts: Vec<String> = positive_idx.iter().map(|&i| texts[i].clone()).collect();
        let mut scores = self.type_scores(&positive_texts)?.into_iter();
        let mut out = Vec::with_capacity(texts.len());
        let mut next_positive = positive_idx.iter().peekable();
        for (i, &p) in td.iter().enumerate() {
            let types = if next_positive.peek() == Some(&&i) {
                next_positive.next();
                scores.next().unwrap_or_default()
            } else {
                BTreeMap::new()
            };
            out.push(self.decide(p, types));
        }
        Ok(out)
    }

    /// Type-level scores for every text regardless of the gate.
    pub fn predict_types(&self, texts: &[String]) -> Result<Vec<BTreeMap<String, f64>>> {
        if self.types.is_empty() {
            return Err(Error::EmptyTypeSet(format!("ensemble gated by {:?}", self.spec.gate)));
        }
        self.type_scores(texts)
    }
}

pub fn two_stage_predict(
    spec: &EnsembleSpec,
    source: &dyn ModelSource,
    texts: &[String],
) -> Result<Vec<EnsemblePrediction>> {
    LoadedEnsemble::load(spec, source)?.predict(texts)
}

fn fmt_prob(p: f64) -> String {
    format!("{p:.6}")
}

/// Appends `pred_<m>` and `prob_<m>` per model to `table`, predicting on
/// `text_column`.
pub fn annotate_table_with_models(
    table: &Table,
    text_column: &str,
    models: &[(String, Arc<dyn Classifier>)],
) -> Result<Table> {
    let texts = table.column(text_column)?;
    let mut out = table.clone();
    for (name, model) in models {
        let predictions = crate::backend::single_model_predict(model.as_ref(), &texts)?;
        let (labels, probs): (Vec<String>, Vec<String>) =
            predictions.into_iter().map(|(l, p)| (l, fmt_prob(p))).unzip();
        out.push_column(format!("pred_{name}"), labels);
        out.push_column(format!("prob_{name}"), probs);
    }
    Ok(out)
}

/// Appends `is_td`, `td_prob`, `primary_type` and `prob_<type>` columns.
/// Type cells stay empty on gate-negative rows.
pub fn annotate_table_with_ensemble(
    table: &Table,
    text_column: &str,
    ensemble: &LoadedEnsemble,
) -> Result<Table> {
    let texts = table.column(text_column)?;
    let predictions = ensemble.predict(&texts)?;
    let mut out = table.clone();
    out.push_column("is_td", predictions.iter().map(|p| p.is_td.to_string()).collect());
    out.push_column("td_prob", predictions.iter().map(|p| fmt_prob(p.td_probability)).collect());
    out.push_column(
        "primary_type",
        predictions.iter().map(|p| p.primary_type.clone().unwrap_or_default()).collect(),
    );
    for name in ensemble.type_names() {
        out.push_column(
            format!("prob_{name}"),
            predictions
                .iter()
                .map(|p| p.type_probabilities.get(&name).map(|&v| fmt_prob(v)).unwrap_or_default())
                .collect(),
        );
    }
    Ok(out)
}

pub enum Annotator<'a> {
    Models(&'a [(String, Arc<dyn Classifier>)]),
    Ensemble(&'a LoadedEnsemble),
}

/// Annotated copy of `dataset` as a `text,label,...` table.
pub fn annotate_dataset(annotator: Annotator<'_>, dataset: &LabeledDataset) -> Result<Table> {
    let table = dataset.to_table();
    match annotator {
        Annotator::Models(models) => annotate_table_with_models(&table, DEFAULT_TEXT_COLUMN, models),
        Annotator::Ensemble(e) => annotate_table_with_ensemble(&table, DEFAULT_TEXT_COLUMN, e),
    }
}
