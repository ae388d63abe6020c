//! Training orchestration: validation carve-out, early stopping, best-epoch
//! checkpointing, held-out test evaluation, emissions capture and k-fold
//! cross-validation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::{
    compute_class_weights, default_positive_label, save_checkpoint, BackendConfig, BackendFactory,
    Checkpoint, EpochControl, TrainInput,
};
use crate::dataset::{kfold_partition, stratified_split, DatasetSplit, LabeledDataset, SplitConfig};
use crate::emissions::{EmissionsAggregator, EmissionsConfig, EmissionsReport, Phase};
use crate::error::{Error, Result};
use crate::metrics::{report_one_vs_rest, Metric, MetricsReport};

pub const CHECKPOINT_FILE: &str = "checkpoint.tds";
pub const RUN_FILE: &str = "run.json";
pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitoredMetric {
    ValidationF1,
    ValidationMcc,
    ValidationLoss,
}

impl MonitoredMetric {
    pub fn maximize(self) -> bool {
        !matches!(self, MonitoredMetric::ValidationLoss)
    }

    fn value(self, record: &EpochRecord) -> f64 {
        match self {
            MonitoredMetric::ValidationF1 => record.validation.f1,
            MonitoredMetric::ValidationMcc => record.validation.mcc,
            MonitoredMetric::ValidationLoss => record.validation_loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    pub enabled: bool,
    pub patience: usize,
    pub min_delta: f64,
    pub monitored: MonitoredMetric,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            patience: 2,
            min_delta: 0.0,
            monitored: MonitoredMetric::ValidationF1,
        }
    }
}

impl EarlyStopConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && self.patience == 0 {
            return Err(Error::InvalidConfig("patience must be at least 1".into()));
        }
        if self.min_delta.is_nan() || self.min_delta < 0.0 {
            return Err(Error::InvalidConfig("min_delta must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    /// Stop now; `best_index` is the 1-based epoch to keep.
    Stop { best_index: usize },
}

/// Earliest 1-based index of the best value in `history`.
pub fn best_index(history: &[f64], maximize: bool) -> usize {
    let sign = if maximize { 1.0 } else { -1.0 };
    let mut best = 0;
    for (i, v) in history.iter().enumerate() {
        if sign * v > sign * history[best] {
            best = i;
        }
    }
    best + 1
}

/// Stops once `patience` consecutive epochs fail to beat the reference
/// value by more than `min_delta`. The reference moves only on such an
/// improvement. Never stops before epoch `patience + 1`.
pub fn early_stop_decision(history: &[f64], cfg: &EarlyStopConfig) -> StopDecision {
    if !cfg.enabled || history.is_empty() {
        return StopDecision::Continue;
    }
    let sign = if cfg.monitored.maximize() { 1.0 } else { -1.0 };
    let mut reference = sign * history[0];
    let mut stale = 0;
    for v in &history[1..] {
        let v = sign * v;
        if v > reference + cfg.min_delta {
            reference = v;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    if stale >= cfg.patience {
        StopDecision::Stop {
            best_index: best_index(history, cfg.monitored.maximize()),
        }
    } else {
        StopDecision::Continue
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub validation: MetricsReport,
    pub wall_seconds: f64,
}

/// Called with `(epoch, max_epochs)` after every epoch.
pub type ProgressHook = Arc<dyn Fn(usize, usize) + Send + Sync>;

/// Everything a training run needs besides the data and the backend.
#[derive(Clone)]
pub struct RunConfig {
    pub backend: BackendConfig,
    pub early_stop: EarlyStopConfig,
    pub val_fraction: f64,
    /// Overrides [`default_positive_label`].
    pub positive_label: Option<String>,
    pub emissions: EmissionsConfig,
    pub progress: Option<ProgressHook>,
}

impl std::fmt::Debug for RunConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunConfig")
            .field("backend", &self.backend)
            .field("early_stop", &self.early_stop)
            .field("val_fraction", &self.val_fraction)
            .field("positive_label", &self.positive_label)
            .field("emissions", &self.emissions)
            .finish_non_exhaustive()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backend: BackendConfig::default(),
            early_stop: EarlyStopConfig::default(),
            val_fraction: DEFAULT_VAL_FRACTION,
            positive_label: None,
            emissions: EmissionsConfig::default(),
            progress: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backend.validate()?;
        self.early_stop.validate()?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "val_fraction must lie in (0, 0.5), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub backend_kind: String,
    pub label_order: Vec<String>,
    pub positive_label: String,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub checkpoint_path: PathBuf,
    #[serde(rename = "metrics")]
    pub test_metrics: MetricsReport,
    pub emissions: EmissionsReport,
    pub inference_emissions: EmissionsReport,
    pub config: BackendConfig,
    pub early_stop: EarlyStopConfig,
    pub val_fraction: f64,
    pub train_records: usize,
    pub validation_records: usize,
    pub test_records: usize,
}

impl TrainingRun {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Per-epoch table for terminal output.
    pub fn history_table(&self) -> String {
        let mut out = String::from("epoch  train_loss  val_loss  val_f1  val_mcc  seconds\n");
        for r in &self.history {
            let mark = if r.epoch == self.best_epoch { " *" } else { "" };
            let _ = writeln!(
                out,
                "{:>5}  {:>10.6}  {:>8.6}  {:>6.4}  {:>7.4}  {:>7.2}{mark}",
                r.epoch, r.train_loss, r.validation_loss, r.validation.f1, r.validation.mcc, r.wall_seconds
            );
        }
        out
    }
}

struct Fitted {
    history: Vec<EpochRecord>,
    best_epoch: usize,
    checkpoint: Checkpoint,
    test_metrics: MetricsReport,
    emissions: EmissionsReport,
    inference_emissions: EmissionsReport,
    positive_label: String,
    label_order: Vec<String>,
    validation_records: usize,
    train_records: usize,
}

fn resolve_positive(dataset: &LabeledDataset, requested: Option<&str>) -> Result<String> {
    match requested {
        Some(p) if dataset.label_set().iter().any(|l| l == p) => Ok(p.to_string()),
        Some(p) => Err(Error::InvalidConfig(format!(
            "positive label {p:?} not among {:?}",
            dataset.label_set()
        ))),
        None => default_positive_label(dataset.label_set())
            .ok_or_else(|| Error::EmptyDataset(dataset.source().to_string())),
    }
}

fn fit_and_evaluate(
    split: &DatasetSplit,
    factory: &dyn BackendFactory,
    run: &RunConfig,
    positive_label: &str,
) -> Result<Fitted> {
    run.validate()?;
    let config = &run.backend;
    let carve = SplitConfig {
        train_fraction: 1.0 - run.val_fraction,
        min_words: 0,
        seed: config.seed,
        stratified: true,
    };

    let (fitted, emissions) = run.emissions.track(Phase::Training, || -> Result<_> {
        let carved = stratified_split(&split.train, &carve)?;
        let (fit, validation) = (carved.train, carved.test);
        let weights = if config.class_weighting {
            Some(compute_class_weights(fit.class_counts())?)
        } else {
            None
        };
        let mut backend = factory.create()?;
        let mut history: Vec<EpochRecord> = Vec::new();
        let mut monitored: Vec<f64> = Vec::new();
        let mut best: Option<(usize, Checkpoint)> = None;
        let mut epoch_start = Instant::now();
        let monitor = run.early_stop.monitored;
        let sign = if monitor.maximize() { 1.0 } else { -1.0 };
        let model = backend.train(
            TrainInput {
                train: &fit,
                validation: &validation,
                config,
                positive_label,
                class_weights: weights.as_ref(),
            },
            &mut |report| {
                let record = EpochRecord {
                    epoch: report.epoch,
                    train_loss: report.train_loss,
                    validation_loss: report.validation_loss,
                    validation: report.validation.clone(),
                    wall_seconds: epoch_start.elapsed().as_secs_f64(),
                };
                let value = monitor.value(&record);
                let improved = best.is_none() || monitored.iter().all(|&m| sign * value > sign * m);
                if improved {
                    best = Some((report.epoch, report.model.to_checkpoint()?));
                }
                monitored.push(value);
                history.push(record);
                if let Some(progress) = &run.progress {
                    progress(report.epoch, config.epochs);
                }
                epoch_start = Instant::now();
                Ok(match early_stop_decision(&monitored, &run.early_stop) {
                    StopDecision::Stop { .. } => EpochControl::Stop,
                    StopDecision::Continue => EpochControl::Continue,
                })
            },
        )?;
        let label_order = model.label_order().to_vec();
        let (best_epoch, checkpoint) =
            best.ok_or_else(|| Error::Runtime("backend completed no epochs".into()))?;
        debug_assert_eq!(best_epoch, best_index(&monitored, monitor.maximize()));
        Ok((history, best_epoch, checkpoint, label_order, validation.len(), fit.len()))
    });
    let (history, best_epoch, checkpoint, label_order, validation_records, train_records) = fitted?;

    let restored = factory.restore(checkpoint.clone())?;
    let (test_metrics, inference_emissions) = run.emissions.track(Phase::Inference, || {
        let predictions: Vec<String> = crate::backend::single_model_predict(restored.as_ref(), &split.test.texts())?
            .into_iter()
            .map(|(label, _)| label)
            .collect();
        report_one_vs_rest(&predictions, &split.test.labels(), positive_label)
    });

    Ok(Fitted {
        history,
        best_epoch,
        checkpoint,
        test_metrics: test_metrics?,
        emissions,
        inference_emissions,
        positive_label: positive_label.to_string(),
        label_order,
        validation_records,
        train_records,
    })
}

/// Trains on `split.train` (minus a stratified validation slice), keeps the
/// best epoch's checkpoint in `out_dir/checkpoint.tds`, evaluates it on
/// `split.test` and writes `out_dir/run.json`.
pub fn train_run(
    split: &DatasetSplit,
    factory: &dyn BackendFactory,
    run: &RunConfig,
    out_dir: impl AsRef<Path>,
) -> Result<TrainingRun> {
    let out_dir = out_dir.as_ref();
    let positive = resolve_positive(&split.train, run.positive_label.as_deref())?;
    let fitted = fit_and_evaluate(split, factory, run, &positive)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&fitted.checkpoint, &checkpoint_path)?;
    let result = TrainingRun {
        backend_kind: fitted.checkpoint.backend_kind.clone(),
        label_order: fitted.label_order,
        positive_label: fitted.positive_label,
        history: fitted.history,
        best_epoch: fitted.best_epoch,
        checkpoint_path,
        test_metrics: fitted.test_metrics,
        emissions: fitted.emissions,
        inference_emissions: fitted.inference_emissions,
        config: run.backend.clone(),
        early_stop: run.early_stop.clone(),
        val_fraction: run.val_fraction,
        train_records: fitted.train_records,
        validation_records: fitted.validation_records,
        test_records: split.test.len(),
    };
    let run_path = out_dir.join(RUN_FILE);
    let json = serde_json::to_vec_pretty(&result).expect("run serializes");
    std::fs::write(&run_path, json).map_err(|e| Error::io(&run_path, e))?;
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
}

impl MetricSummary {
    fn from_fn(f: impl Fn(Metric) -> f64) -> Self {
        Self {
            accuracy: f(Metric::Accuracy),
            precision: f(Metric::Precision),
            recall: f(Metric::Recall),
            f1: f(Metric::F1),
            mcc: f(Metric::Mcc),
        }
    }

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Accuracy => self.accuracy,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
            Metric::F1 => self.f1,
            Metric::Mcc => self.mcc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub k: usize,
    pub per_fold: Vec<MetricsReport>,
    pub mean: MetricSummary,
    /// Sample standard deviation (n − 1 denominator).
    pub std: MetricSummary,
    pub emissions: EmissionsReport,
}

impl CrossValReport {
    fn from_folds(per_fold: Vec<MetricsReport>, emissions: EmissionsReport) -> Self {
        let n = per_fold.len() as f64;
        let mean = MetricSummary::from_fn(|m| per_fold.iter().map(|r| r.get(m)).sum::<f64>() / n);
        let std = MetricSummary::from_fn(|m| {
            if per_fold.len() < 2 {
                return 0.0;
            }
            let mu = mean.get(m);
            let ss: f64 = per_fold.iter().map(|r| (r.get(m) - mu).powi(2)).sum();
            (ss / (n - 1.0)).sqrt()
        });
        Self {
            k: per_fold.len(),
            per_fold,
            mean,
            std,
            emissions,
        }
    }

    /// One row per fold, then a summary with metrics as rows and mean/std
    /// columns.
    pub fn table(&self) -> String {
        let mut out = format!("{:<7}", "Fold");
        for metric in Metric::ALL {
            let _ = write!(out, "  {:>9}", metric.title());
        }
        out.push('\n');
        for (i, r) in self.per_fold.iter().enumerate() {
            let _ = write!(out, "{:<7}", i + 1);
            for metric in Metric::ALL {
                let _ = write!(out, "  {:>9.4}", r.get(metric));
            }
            out.push('\n');
        }
        let _ = writeln!(out, "\n{:<9}  {:>7}  {:>7}", "Metric", "Mean", "Std");
        for metric in Metric::ALL {
            let _ = writeln!(
                out,
                "{:<9}  {:>7.4}  {:>7.4}",
                metric.title(),
                self.mean.get(metric),
                self.std.get(metric)
            );
        }
        out
    }
}

/// Stratified k-fold cross-validation. Each fold trains on the other k−1
/// folds (with its own validation carve-out) and is scored on the held-out
/// fold. Fold models are discarded.
pub fn cross_validate(
    dataset: &LabeledDataset,
    k: usize,
    factory: &dyn BackendFactory,
    run: &RunConfig,
) -> Result<CrossValReport> {
    let folds = kfold_partition(dataset, k, run.backend.seed)?;
    let positive = resolve_positive(dataset, run.positive_label.as_deref())?;
    let aggregator = EmissionsAggregator::new();
    let mut per_fold = Vec::with_capacity(k);
    for fold in 0..k {
        let (train_idx, test_idx) = folds.fold(fold);
        let split = DatasetSplit {
            train: dataset.subset(&train_idx, format!("{}#fold{fold}-train", dataset.source())),
            test: dataset.subset(&test_idx, format!("{}#fold{fold}-test", dataset.source())),
            config: SplitConfig {
                train_fraction: 1.0 - 1.0 / k as f64,
                min_words: 0,
                seed: run.backend.seed,
                stratified: true,
            },
            dropped_count: 0,
        };
        let fitted = fit_and_evaluate(&split, factory, run, &positive)?;
        aggregator.add(&fitted.emissions);
        aggregator.add(&fitted.inference_emissions);
        crate::emissions::global_aggregator().add(&fitted.emissions);
        per_fold.push(fitted.test_metrics);
    }
    let emissions = aggregator
        .total(Phase::Training)
        .unwrap_or_else(|| EmissionsReport::zero(Phase::Training, run.emissions.intensity));
    Ok(CrossValReport::from_folds(per_fold, emissions))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(patience: usize, min_delta: f64) -> EarlyStopConfig {
        EarlyStopConfig {
            enabled: true,
            patience,
            min_delta,
            monitored: MonitoredMetric::ValidationF1,
        }
    }

    #[test]
    fn stop_examples() {
        assert_eq!(
            early_stop_decision(&[0.70, 0.80, 0.79, 0.80], &cfg(2, 0.0)),
            StopDecision::Stop { best_index: 2 }
        );
        assert_eq!(
            early_stop_decision(&[0.1, 0.2, 0.3, 0.4, 0.5], &cfg(1, 0.0)),
            StopDecision::Continue
        );
        assert_eq!(early_stop_decision(&[0.5], &cfg(1, 0.0)), StopDecision::Continue);
    }

    #[test]
    fn disabled_never_stops() {
        let h = [0.9, 0.1, 0.1, 0.1];
        assert_eq!(early_stop_decision(&h, &EarlyStopConfig::disabled()), StopDecision::Continue);
    }

    #[test]
    fn loss_is_minimized() {
        let c = EarlyStopConfig {
            monitored: MonitoredMetric::ValidationLoss,
            ..cfg(1, 0.0)
        };
        assert_eq!(early_stop_decision(&[0.5, 0.4], &c), StopDecision::Continue);
        assert_eq!(early_stop_decision(&[0.5, 0.4, 0.45], &c), StopDecision::Stop { best_index: 2 });
    }

    #[test]
    fn cross_val_stats() {
        let mk = |mcc: f64| MetricsReport {
            accuracy: 1.0,
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
            mcc,
            support: 10,
            positive_label: "p".into(),
            confusion: None,
        };
        let r = CrossValReport::from_folds(vec![mk(0.0), mk(1.0)], EmissionsReport::zero(Phase::Training, 0.0));
        assert_eq!(r.mean.mcc, 0.5);
        assert!((r.std.mcc - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.std.accuracy, 0.0);
        assert_eq!(r.table().lines().count(), 3 + 1 + 6);
    }

    #[test]
    fn run_config_validation() {
        let mut run = RunConfig::default();
        assert!(run.validate().is_ok());
        run.val_fraction = 0.5;
        assert!(run.validate().is_err());
        run.val_fraction = 0.1;
        run.early_stop.patience = 0;
        assert!(run.validate().is_err());
    }
}
